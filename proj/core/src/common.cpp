#include "bttt/common.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <stdexcept>

namespace bttt {

LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("BATTERYTTT_LOG");
        if (env == nullptr) return LogLevel::Warn;
        if (std::strcmp(env, "error") == 0) return LogLevel::Error;
        if (std::strcmp(env, "warn") == 0) return LogLevel::Warn;
        if (std::strcmp(env, "info") == 0) return LogLevel::Info;
        if (std::strcmp(env, "debug") == 0) return LogLevel::Debug;
        return LogLevel::Warn;
    }();
    return level;
}

void log_message(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) > static_cast<int>(log_level())) return;
    static const char* names[] = {"error", "warn", "info", "debug"};
    std::fprintf(stderr, "[%s] %s\n", names[static_cast<int>(level)], msg.c_str());
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& context) {
    double out = 0.0;
    const char* begin = s.c_str();
    const char* end = begin + s.size();
    auto res = std::from_chars(begin, end, out);
    if (res.ec != std::errc() || res.ptr != end) {
        throw std::runtime_error(context + ": not a number: '" + s + "'");
    }
    return out;
}

}  // namespace bttt
