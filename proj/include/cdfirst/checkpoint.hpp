#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdfirst/model.hpp"

namespace cdfirst {

inline constexpr const char* kCheckpointFormat = "cdfirst-checkpoint-v1";

namespace detail {

// Doubles are stored as fixed-width hex of their bit patterns: value- and
// byte-exact regardless of printf rounding behavior.
inline std::string hex_encode(std::span<const double> v) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(v.size() * 16);
    for (double d : v) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
        for (int k = 15; k >= 0; --k) out += digits[(bits >> (4 * k)) & 0xF];
    }
    return out;
}

inline std::vector<double> hex_decode(const std::string& s, const std::string& what) {
    if (s.size() % 16 != 0)
        throw ConfigError("checkpoint: field '" + what + "' has invalid length");
    std::vector<double> out(s.size() / 16);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 16; ++k) {
            char c = s[i * 16 + k];
            int d = c >= '0' && c <= '9'   ? c - '0'
                    : c >= 'a' && c <= 'f' ? c - 'a' + 10
                    : c >= 'A' && c <= 'F' ? c - 'A' + 10
                                           : -1;
            if (d < 0)
                throw ConfigError("checkpoint: field '" + what + "' has invalid hex");
            bits = (bits << 4) | static_cast<std::uint64_t>(d);
        }
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

inline std::string hex1(double d) { return hex_encode(std::span<const double>(&d, 1)); }

}  // namespace detail

inline void save_checkpoint(const CondDensityModel& m, const std::string& path) {
    const auto& s = m.layout.shape;
    nlohmann::ordered_json j;
    j["format"] = kCheckpointFormat;
    j["shape"] = {
        {"d_x", s.d_x},
        {"d_y", s.d_y},
        {"stack_widths", s.stack_widths},
        {"cond_widths", s.cond_widths},
        {"act_groups", s.act_groups},
        {"act_group_size", s.act_group_size},
        {"final_groups", s.final_groups},
        {"final_group_size", s.final_group_size},
        {"kind", head_kind_name(s.kind)},
        {"batch_norm", s.batch_norm},
    };
    j["fd_step"] = detail::hex1(m.fd_step);
    j["norm"] = {
        {"y_min", detail::hex_encode(m.norm.y_min)},
        {"y_max", detail::hex_encode(m.norm.y_max)},
    };
    if (s.batch_norm) {
        nlohmann::ordered_json bn;
        for (int i = 0; i < s.d_y; ++i)
            for (int l = 0; l < s.n_layers(); ++l) {
                std::string key = fmt_int(i) + "." + fmt_int(l);
                bn["mean." + key] = detail::hex_encode(m.bn.mean[i][l]);
                bn["inv_std." + key] = detail::hex_encode(m.bn.inv_std[i][l]);
            }
        j["bn"] = std::move(bn);
    }
    nlohmann::ordered_json echo;
    for (const auto& [k, v] : m.config_echo) echo[k] = v;
    j["config_echo"] = std::move(echo);
    nlohmann::ordered_json params;
    for_each_param_array(m.layout, [&](const std::string& name, Slice sl) {
        params[name] = detail::hex_encode(
            std::span<const double>(m.params.data() + sl.off, sl.len));
    });
    j["params"] = std::move(params);

    // atomic publish: never leave a partial checkpoint behind
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw DataError("cannot write '" + tmp + "'");
        out << j.dump(1) << "\n";
        if (!out) throw DataError("short write to '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline CondDensityModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path + "'");
    nlohmann::ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint '" + path + "': " + e.what());
    }
    if (!j.contains("format") || j["format"] != kCheckpointFormat)
        throw ConfigError("checkpoint '" + path + "': format tag mismatch (expected " +
                          std::string(kCheckpointFormat) + ")");
    try {
        const auto& sh = j.at("shape");
        ModelShape s;
        s.d_x = sh.at("d_x").get<int>();
        s.d_y = sh.at("d_y").get<int>();
        s.stack_widths = sh.at("stack_widths").get<std::vector<int>>();
        s.cond_widths = sh.at("cond_widths").get<std::vector<int>>();
        s.act_groups = sh.at("act_groups").get<int>();
        s.act_group_size = sh.at("act_group_size").get<int>();
        s.final_groups = sh.at("final_groups").get<int>();
        s.final_group_size = sh.at("final_group_size").get<int>();
        std::string kind = sh.at("kind").get<std::string>();
        s.kind = kind == "soft"   ? HeadKind::soft
                 : kind == "hard" ? HeadKind::hard
                 : kind == "mlp"  ? HeadKind::mlp
                                  : throw ConfigError("checkpoint: unknown head kind '" +
                                                      kind + "'");
        s.batch_norm = sh.at("batch_norm").get<bool>();

        CondDensityModel m;
        m.layout = ModelLayout::build(s);
        m.fd_step = detail::hex_decode(j.at("fd_step").get<std::string>(), "fd_step").at(0);
        m.norm.y_min = detail::hex_decode(j.at("norm").at("y_min").get<std::string>(), "y_min");
        m.norm.y_max = detail::hex_decode(j.at("norm").at("y_max").get<std::string>(), "y_max");
        if (static_cast<int>(m.norm.y_min.size()) != s.d_y ||
            static_cast<int>(m.norm.y_max.size()) != s.d_y)
            throw ConfigError("checkpoint: norm stats do not match d_y");
        m.bn = BnStats::identity(s);
        if (s.batch_norm) {
            for (int i = 0; i < s.d_y; ++i)
                for (int l = 0; l < s.n_layers(); ++l) {
                    std::string key = fmt_int(i) + "." + fmt_int(l);
                    m.bn.mean[i][l] = detail::hex_decode(
                        j.at("bn").at("mean." + key).get<std::string>(), "bn.mean");
                    m.bn.inv_std[i][l] = detail::hex_decode(
                        j.at("bn").at("inv_std." + key).get<std::string>(), "bn.inv_std");
                    if (m.bn.mean[i][l].size() != static_cast<std::size_t>(s.layer_out(l)) ||
                        m.bn.inv_std[i][l].size() != static_cast<std::size_t>(s.layer_out(l)))
                        throw ConfigError("checkpoint: bn stats size mismatch");
                }
        }
        if (j.contains("config_echo"))
            for (const auto& [k, v] : j.at("config_echo").items())
                m.config_echo.emplace_back(k, v.get<std::string>());
        m.params.assign(m.layout.n_params, 0.0);
        for_each_param_array(m.layout, [&](const std::string& name, Slice sl) {
            auto vals = detail::hex_decode(j.at("params").at(name).get<std::string>(), name);
            if (vals.size() != sl.len)
                throw ConfigError("checkpoint: array '" + name + "' has " +
                                  fmt_int(vals.size()) + " values, layout expects " +
                                  fmt_int(sl.len));
            std::copy(vals.begin(), vals.end(), m.params.begin() + sl.off);
        });
        m.sync();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint '" + path + "': " + e.what());
    }
}

}  // namespace cdfirst
