// mmsn/jsonio.hpp — deterministic JSON/CSV writing and validated parsing.
//
// Output floats always carry 17 significant digits so files round-trip
// exactly and reruns are byte-identical; nlohmann/json handles parsing only.
#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>

#include <json.hpp>

#include "mmsn/errors.hpp"

namespace mmsn {

using Json = nlohmann::json;

inline std::string fmt_double(double x) {
    char buf[40];
    auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

inline std::string json_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size() + 2);
    for (char ch : s) {
        switch (ch) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            case '\t': out += "\\t"; break;
            default:
                if (static_cast<unsigned char>(ch) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", ch);
                    out += buf;
                } else {
                    out += ch;
                }
        }
    }
    return out;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed for " + path);
    return ss.str();
}

// Write-temp-then-rename so partially written artifacts never appear.
inline void atomic_write(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out << content;
        out.flush();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("rename failed for " + path + ": " + ec.message());
}

inline Json parse_json(const std::string& text, const std::string& origin) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        // e.byte is the offset of the failure; report the line for humans
        std::size_t line = 1;
        for (std::size_t i = 0; i < e.byte && i < text.size(); ++i)
            if (text[i] == '\n') ++line;
        throw ParseError(origin + ": line " + std::to_string(line) + ": " + e.what());
    }
}

inline Json parse_json_file(const std::string& path) {
    return parse_json(read_file(path), path);
}

// Minimal deterministic writer: values are appended in call order, numbers
// through fmt_double. Nested scopes emit compact one-line JSON unless the
// caller inserts breaks.
class JsonWriter {
public:
    JsonWriter& begin_object() { return token("{"); }
    JsonWriter& end_object() {
        trailing_comma_ = false;
        out_ += '}';
        comma();
        return *this;
    }
    JsonWriter& begin_array() { return token("["); }
    JsonWriter& end_array() {
        trailing_comma_ = false;
        out_ += ']';
        comma();
        return *this;
    }
    JsonWriter& key(const std::string& k) {
        maybe_comma();
        out_ += '"' + json_escape(k) + "\":";
        pending_value_ = true;
        return *this;
    }
    JsonWriter& value(double v) { return raw(fmt_double(v)); }
    JsonWriter& value(int v) { return raw(std::to_string(v)); }
    JsonWriter& value(long v) { return raw(std::to_string(v)); }
    JsonWriter& value(unsigned long long v) { return raw(std::to_string(v)); }
    JsonWriter& value(bool v) { return raw(v ? "true" : "false"); }
    JsonWriter& value(const std::string& v) { return raw('"' + json_escape(v) + '"'); }
    JsonWriter& value(const char* v) { return value(std::string(v)); }
    JsonWriter& newline() {
        out_ += '\n';
        return *this;
    }

    const std::string& str() const { return out_; }

private:
    JsonWriter& token(const char* t) {
        maybe_comma();
        out_ += t;
        return *this;
    }
    JsonWriter& raw(const std::string& t) {
        maybe_comma();
        out_ += t;
        comma();
        return *this;
    }
    void maybe_comma() {
        if (pending_value_) {
            pending_value_ = false;
            return;
        }
        if (trailing_comma_) out_ += ',';
        trailing_comma_ = false;
    }
    void comma() { trailing_comma_ = true; }

    std::string out_;
    bool trailing_comma_ = false;
    bool pending_value_ = false;
};

// ---- strict field access helpers for parsed configs/data ----

inline const Json& require_field(const Json& j, const std::string& key, const std::string& ctx) {
    if (!j.is_object() || !j.contains(key))
        throw ValidationError(ctx + ": missing field '" + key + "'");
    return j.at(key);
}

inline double as_double(const Json& j, const std::string& ctx) {
    if (!j.is_number()) throw ValidationError(ctx + ": expected number");
    return j.get<double>();
}

inline int as_int(const Json& j, const std::string& ctx) {
    if (!j.is_number_integer()) throw ValidationError(ctx + ": expected integer");
    return j.get<int>();
}

inline std::string as_string(const Json& j, const std::string& ctx) {
    if (!j.is_string()) throw ValidationError(ctx + ": expected string");
    return j.get<std::string>();
}

}  // namespace mmsn
