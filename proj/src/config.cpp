#include "aspun/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include "aspun/errors.hpp"
#include "aspun/io.hpp"

namespace aspun::config {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, const char* expected) {
    throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + " (expected " +
                      expected + ")");
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "non-negative integer");
    return out;
}

std::size_t parse_size(std::string_view key, std::string_view v) { return static_cast<std::size_t>(parse_u64(key, v)); }

double parse_real(std::string_view key, std::string_view v) {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
        bad_value(key, v, "finite real number");
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    bad_value(key, v, "true/false/on/off/1/0");
}

std::string real_text(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

struct Field {
    std::string key;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define SIZE_FIELD(KEY, MEMBER)                                                                        \
    Field {                                                                                            \
        KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_size(KEY, v); },                  \
            [](const RunConfig& c) { return std::to_string(c.MEMBER); }                                \
    }
#define U64_FIELD(KEY, MEMBER)                                                                         \
    Field {                                                                                            \
        KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_u64(KEY, v); },                   \
            [](const RunConfig& c) { return std::to_string(c.MEMBER); }                                \
    }
#define REAL_FIELD(KEY, MEMBER)                                                                        \
    Field {                                                                                            \
        KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_real(KEY, v); },                  \
            [](const RunConfig& c) { return real_text(c.MEMBER); }                                     \
    }
#define BOOL_FIELD(KEY, MEMBER)                                                                        \
    Field {                                                                                            \
        KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = parse_bool(KEY, v); },                  \
            [](const RunConfig& c) { return bool_text(c.MEMBER); }                                     \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        SIZE_FIELD("net.stages", net.stages),
        SIZE_FIELD("net.spectral_channels", net.spectral_channels),
        SIZE_FIELD("net.base_channels", net.base_channels),
        SIZE_FIELD("net.window_size", net.window_size),
        SIZE_FIELD("net.pna_pool", net.pna_pool),
        SIZE_FIELD("net.heads", net.num_heads),
        SIZE_FIELD("net.ffn_expansion", net.ffn_expansion),
        BOOL_FIELD("net.use_asp", net.use_asp),
        BOOL_FIELD("net.use_isa", net.use_isa),
        BOOL_FIELD("net.use_gla", net.use_gla),
        BOOL_FIELD("net.use_pna", net.use_pna),
        BOOL_FIELD("net.use_pna_transformer", net.use_pna_transformer),
        Field{"net.attention",
              [](RunConfig& c, std::string_view v) {
                  if (v == "pna") c.net.attention = net::AttentionKind::pna;
                  else if (v == "wmsa") c.net.attention = net::AttentionKind::wmsa;
                  else bad_value("net.attention", v, "pna or wmsa");
              },
              [](const RunConfig& c) {
                  return std::string(c.net.attention == net::AttentionKind::pna ? "pna" : "wmsa");
              }},
        REAL_FIELD("net.asp_eps", net.asp_eps),
        U64_FIELD("net.init_seed", net.init_seed),

        Field{"solver.rho",
              [](RunConfig& c, std::string_view v) {
                  if (v == "auto") c.solver.step_size.reset();
                  else c.solver.step_size = parse_real("solver.rho", v);
              },
              [](const RunConfig& c) {
                  return c.solver.step_size ? real_text(*c.solver.step_size) : std::string("auto");
              }},
        REAL_FIELD("solver.reg_weight", solver.reg_weight),
        SIZE_FIELD("solver.max_iters", solver.max_iters),
        Field{"solver.transform",
              [](RunConfig& c, std::string_view v) {
                  if (v == "identity") c.solver.transform = fista::Transform::identity;
                  else if (v == "dct") c.solver.transform = fista::Transform::dct;
                  else bad_value("solver.transform", v, "identity or dct");
              },
              [](const RunConfig& c) {
                  return std::string(c.solver.transform == fista::Transform::identity ? "identity" : "dct");
              }},
        REAL_FIELD("solver.tolerance", solver.tolerance),
        BOOL_FIELD("solver.accelerate", solver.accelerate),
        SIZE_FIELD("solver.power_iters", solver.power_iters),

        REAL_FIELD("train.lr_initial", train.lr_initial),
        REAL_FIELD("train.lr_min", train.lr_min),
        SIZE_FIELD("train.total_steps", train.total_steps),
        SIZE_FIELD("train.batch_size", train.batch_size),
        REAL_FIELD("train.charbonnier_eps", train.charbonnier_eps),
        U64_FIELD("train.seed", train.seed),
        REAL_FIELD("train.adam_beta1", train.adam.beta1),
        REAL_FIELD("train.adam_beta2", train.adam.beta2),
        REAL_FIELD("train.adam_eps", train.adam.eps),
        SIZE_FIELD("train.eval_interval", train.eval_interval),
        REAL_FIELD("train.noise_sigma", train.noise_sigma),
        SIZE_FIELD("train.scenes", train_scenes),
        SIZE_FIELD("train.eval_scenes", eval_scenes),

        SIZE_FIELD("scene.height", scene.height),
        SIZE_FIELD("scene.width", scene.width),
        SIZE_FIELD("scene.channels", scene.channels),
        SIZE_FIELD("scene.blob_count", scene.blob_count),
        REAL_FIELD("scene.spectral_smoothness", scene.spectral_smoothness),
        U64_FIELD("scene.seed", scene.seed),

        SIZE_FIELD("sim.d", sim.dispersion_step),
        REAL_FIELD("sim.noise", sim.noise_sigma),
        U64_FIELD("sim.mask_seed", sim.mask_seed),
        U64_FIELD("sim.noise_seed", sim.noise_seed),
    };
    return table;
}

#undef SIZE_FIELD
#undef U64_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD

const Field& find_field(std::string_view key) {
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError("unknown key '" + std::string(key) + "'");
    return *it;
}

}  // namespace

void RunConfig::validate() const {
    net.validate();
    solver.validate();
    train.validate();
    if (train_scenes < 1) throw ConfigError("train.scenes must be >= 1");
    if (scene.channels != net.spectral_channels) {
        throw ConfigError("scene.channels must equal net.spectral_channels");
    }
    if (!(sim.noise_sigma >= 0.0)) throw ConfigError("sim.noise must be >= 0");
    if (!(scene.spectral_smoothness > 0.0)) throw ConfigError("scene.spectral_smoothness must be > 0");
    try {
        net.validate_extent(scene.height, scene.width);
    } catch (const ShapeError& e) {
        throw ConfigError(e.what());
    }
}

const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> out;
        for (const auto& f : fields()) out.push_back(f.key);
        return out;
    }();
    return keys;
}

void set_value(RunConfig& cfg, std::string_view key, std::string_view value) {
    find_field(key).set(cfg, trim(value));
}

std::string get_value(const RunConfig& cfg, std::string_view key) { return find_field(key).get(cfg); }

RunConfig parse(std::string_view text) {
    RunConfig cfg;
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto end = std::min(text.find('\n', pos), text.size());
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError("expected key = value", line_no);
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key", line_no);
        if (seen.contains(key)) throw ConfigError("repeated key '" + std::string(key) + "'", line_no);
        seen.emplace(key);
        try {
            set_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(e.what(), line_no);
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig load(const std::filesystem::path& path) {
    const auto bytes = io::read_file(path);
    return parse(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string format(const RunConfig& cfg) {
    std::ostringstream out;
    std::string section;
    for (const auto& f : fields()) {
        const auto ns = f.key.substr(0, f.key.find('.'));
        if (ns != section) {
            if (!section.empty()) out << '\n';
            section = ns;
        }
        out << f.key << " = " << f.get(cfg) << '\n';
    }
    return out.str();
}

}  // namespace aspun::config
