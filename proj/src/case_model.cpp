#include "gridguard/case_model.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace gridguard {

using nlohmann::json;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

std::size_t line_of_offset(std::string_view text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + offset, '\n'));
}

// ---------------------------------------------------------------------------
// MATPOWER-style text

struct MatrixRow {
    std::size_t line;
    std::vector<double> values;
};

struct MatpowerTables {
    double base_mva = 0.0;
    std::map<std::string, std::vector<MatrixRow>> matrices;
};

double parse_number(std::string_view tok, std::size_t line) {
    if (tok == "Inf" || tok == "inf") return std::numeric_limits<double>::infinity();
    if (tok == "-Inf" || tok == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size())
        throw CaseSyntaxError(line, "invalid number '" + std::string(tok) + "'");
    return v;
}

// Removes '%' comments while keeping newlines so offsets map back to lines.
std::string strip_comments(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool in_comment = false;
    bool in_string = false;
    for (char ch : text) {
        if (ch == '\n') {
            in_comment = false;
            in_string = false;
            out.push_back(ch);
            continue;
        }
        if (in_comment) {
            out.push_back(' ');
            continue;
        }
        if (ch == '\'') in_string = !in_string;
        if (ch == '%' && !in_string) {
            in_comment = true;
            out.push_back(' ');
            continue;
        }
        out.push_back(ch);
    }
    return out;
}

MatpowerTables scan_matpower(std::string_view raw) {
    const std::string text = strip_comments(raw);
    MatpowerTables tables;
    std::size_t pos = 0;
    bool saw_base = false;
    while ((pos = text.find("mpc.", pos)) != std::string::npos) {
        const std::size_t start = pos;
        pos += 4;
        std::size_t name_end = pos;
        while (name_end < text.size() && (std::isalnum(static_cast<unsigned char>(text[name_end])) || text[name_end] == '_'))
            ++name_end;
        const std::string name = text.substr(pos, name_end - pos);
        std::size_t eq = text.find_first_not_of(" \t", name_end);
        if (eq == std::string::npos || text[eq] != '=') {
            pos = name_end;
            continue;
        }
        std::size_t rhs = text.find_first_not_of(" \t\r\n", eq + 1);
        if (rhs == std::string::npos) throw CaseSyntaxError(line_of_offset(text, start), "missing value for mpc." + name);
        if (text[rhs] == '[') {
            const std::size_t close = text.find(']', rhs);
            if (close == std::string::npos)
                throw CaseSyntaxError(line_of_offset(text, rhs), "unterminated matrix mpc." + name);
            std::vector<MatrixRow> rows;
            MatrixRow row{line_of_offset(text, rhs + 1), {}};
            std::size_t line = row.line;
            std::string tok;
            auto flush_tok = [&] {
                if (!tok.empty()) {
                    row.values.push_back(parse_number(tok, line));
                    tok.clear();
                }
            };
            auto flush_row = [&] {
                flush_tok();
                if (!row.values.empty()) rows.push_back(row);
                row.values.clear();
                row.line = line;
            };
            for (std::size_t i = rhs + 1; i < close; ++i) {
                const char ch = text[i];
                if (ch == '\n') {
                    flush_row();
                    ++line;
                    row.line = line;
                } else if (ch == ';') {
                    flush_row();
                } else if (ch == ' ' || ch == '\t' || ch == ',' || ch == '\r') {
                    flush_tok();
                } else if (ch == '.' || ch == '-' || ch == '+' || ch == 'e' || ch == 'E' ||
                           std::isalnum(static_cast<unsigned char>(ch))) {
                    tok.push_back(ch);
                } else {
                    throw CaseSyntaxError(line, std::string("unexpected character '") + ch + "' in mpc." + name);
                }
            }
            flush_row();
            tables.matrices[name] = std::move(rows);
            pos = close + 1;
        } else {
            const std::size_t semi = text.find_first_of(";\n", rhs);
            std::string value = text.substr(rhs, semi == std::string::npos ? std::string::npos : semi - rhs);
            while (!value.empty() && std::isspace(static_cast<unsigned char>(value.back()))) value.pop_back();
            if (name == "baseMVA") {
                tables.base_mva = parse_number(value, line_of_offset(text, rhs));
                saw_base = true;
            }
            pos = semi == std::string::npos ? text.size() : semi;
        }
    }
    if (!saw_base) throw CaseSyntaxError(1, "missing mpc.baseMVA");
    return tables;
}

const std::vector<MatrixRow>& require_matrix(const MatpowerTables& t, const std::string& name, std::size_t min_cols,
                                            bool may_be_empty = false) {
    auto it = t.matrices.find(name);
    if (it == t.matrices.end() || (it->second.empty() && !may_be_empty)) throw CaseSyntaxError(1, "missing matrix mpc." + name);
    for (const auto& row : it->second)
        if (row.values.size() < min_cols)
            throw CaseSyntaxError(row.line, "mpc." + name + " row needs at least " + std::to_string(min_cols) + " columns");
    return it->second;
}

double json_number(const json& j, const char* key, double fallback) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return fallback;
    if (!it->is_number()) throw CaseSemanticError(std::string("sidecar field '") + key + "' must be numeric");
    return it->get<double>();
}

json parse_json(std::string_view text, const char* what) {
    try {
        return json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        throw CaseSyntaxError(line_of_offset(text, e.byte == 0 ? 0 : e.byte - 1), std::string(what) + ": " + e.what());
    }
}

void apply_sidecar(NetworkCase& c, std::string_view sidecar_text) {
    if (sidecar_text.empty()) return;
    const json sc = parse_json(sidecar_text, "sidecar");
    if (!sc.is_object()) throw CaseSyntaxError(1, "sidecar must be a JSON object");
    const double base = c.base_mva;

    if (auto it = sc.find("slack_cost"); it != sc.end()) {
        c.slack_cost = {json_number(*it, "c2", 0.0), json_number(*it, "c1", 0.0), json_number(*it, "c0", 0.0)};
    } else {
        c.slack_cost = c.generators.at(c.slack_generator()).cost;
    }
    if (auto it = sc.find("slack_limits"); it != sc.end()) {
        const double inf = std::numeric_limits<double>::infinity();
        c.slack_limits = {json_number(*it, "p_min_mw", -inf) / base, json_number(*it, "p_max_mw", inf) / base,
                          json_number(*it, "q_min_mvar", -inf) / base, json_number(*it, "q_max_mvar", inf) / base};
    }
    if (auto it = sc.find("penalties"); it != sc.end()) {
        c.penalties = {json_number(*it, "xi_line", 100.0), json_number(*it, "xi_voltage", 100.0)};
    }

    const std::size_t slack_gen = c.slack_generator();
    if (auto it = sc.find("attackable_generator_buses"); it != sc.end()) {
        for (const auto& id : *it) {
            const std::size_t bus = c.bus_index(id.get<int>());
            bool found = false;
            for (std::size_t g = 0; g < c.n_gen(); ++g) {
                if (c.generators[g].bus == bus && g != slack_gen) {
                    c.attackable.push_back(g);
                    found = true;
                }
            }
            if (!found) throw CaseSemanticError("attackable bus " + std::to_string(id.get<int>()) + " hosts no attackable generator");
        }
    }
    if (auto it = sc.find("attackable_generators"); it != sc.end()) {
        for (const auto& g : *it) c.attackable.push_back(g.get<std::size_t>());
    }
    std::sort(c.attackable.begin(), c.attackable.end());
    c.attackable.erase(std::unique(c.attackable.begin(), c.attackable.end()), c.attackable.end());

    json defaults = sc.value("bess_defaults", json::object());
    if (auto it = sc.find("bess"); it != sc.end()) {
        for (const auto& unit_json : *it) {
            json u = defaults;
            u.update(unit_json);
            BessUnit b;
            if (!u.contains("bus")) throw CaseSemanticError("bess entry without bus");
            b.bus = c.bus_index(u["bus"].get<int>());
            b.p_ch_max = json_number(u, "p_ch_max_mw", 0.0) / base;
            b.p_dis_max = json_number(u, "p_dis_max_mw", 0.0) / base;
            b.q_min = json_number(u, "q_min_mvar", 0.0) / base;
            b.q_max = json_number(u, "q_max_mvar", 0.0) / base;
            b.e_max_mwh = json_number(u, "e_max_mwh", 0.0);
            if (u.contains("round_trip_efficiency")) {
                const double rte = json_number(u, "round_trip_efficiency", 1.0);
                b.eta_ch = b.eta_dis = std::sqrt(rte);
            }
            b.eta_ch = json_number(u, "eta_ch", b.eta_ch);
            b.eta_dis = json_number(u, "eta_dis", b.eta_dis);
            b.soc_min = json_number(u, "soc_min", 0.0);
            b.soc_max = json_number(u, "soc_max", 1.0);
            b.cost_per_mw = json_number(u, "cost_per_mw", 0.0);
            c.bess.push_back(b);
        }
    }
}

NetworkCase parse_matpower(std::string_view text, std::string_view sidecar) {
    const MatpowerTables t = scan_matpower(text);
    NetworkCase c;
    c.base_mva = t.base_mva;
    if (!(c.base_mva > 0.0)) throw CaseSemanticError("baseMVA must be positive");
    const double base = c.base_mva;

    std::map<int, std::size_t> index;
    for (const auto& row : require_matrix(t, "bus", 13)) {
        const auto& v = row.values;
        Bus b;
        b.id = static_cast<int>(v[0]);
        const int type = static_cast<int>(v[1]);
        if (type == 4) continue;  // isolated
        if (type < 1 || type > 3) throw CaseSyntaxError(row.line, "unknown bus type " + std::to_string(type));
        b.type = static_cast<BusType>(type);
        b.pd = v[2] / base;
        b.qd = v[3] / base;
        b.gs = v[4] / base;
        b.bs = v[5] / base;
        b.vm0 = v[7];
        b.va0 = v[8] * kDeg;
        b.vmax = v[11];
        b.vmin = v[12];
        if (!index.emplace(b.id, c.buses.size()).second)
            throw CaseSemanticError("duplicate bus id " + std::to_string(b.id));
        c.buses.push_back(b);
    }
    auto bus_of = [&](double id, std::size_t line) {
        auto it = index.find(static_cast<int>(id));
        if (it == index.end())
            throw CaseSemanticError("line " + std::to_string(line) + ": reference to unknown bus " + std::to_string(static_cast<int>(id)));
        return it->second;
    };

    const auto& gen_rows = require_matrix(t, "gen", 10);
    const auto& cost_rows = require_matrix(t, "gencost", 4);
    if (cost_rows.size() < gen_rows.size()) throw CaseSyntaxError(cost_rows.back().line, "mpc.gencost has fewer rows than mpc.gen");
    for (std::size_t k = 0; k < gen_rows.size(); ++k) {
        const auto& v = gen_rows[k].values;
        if (v[7] <= 0.0) continue;  // out of service
        Generator g;
        g.bus = bus_of(v[0], gen_rows[k].line);
        g.qmax = v[3] / base;
        g.qmin = v[4] / base;
        g.vg = v[5];
        g.pmax = v[8] / base;
        g.pmin = v[9] / base;
        const auto& cv = cost_rows[k].values;
        if (static_cast<int>(cv[0]) != 2) throw CaseSyntaxError(cost_rows[k].line, "only polynomial gencost (model 2) is supported");
        const int n = static_cast<int>(cv[3]);
        if (n < 1 || n > 3 || cv.size() < static_cast<std::size_t>(4 + n))
            throw CaseSyntaxError(cost_rows[k].line, "polynomial gencost must have 1 to 3 coefficients");
        double coeff[3] = {0.0, 0.0, 0.0};  // c2, c1, c0
        for (int i = 0; i < n; ++i) coeff[3 - n + i] = cv[4 + i];
        g.cost = {coeff[0], coeff[1], coeff[2]};
        c.generators.push_back(g);
    }

    for (const auto& row : require_matrix(t, "branch", 11, true)) {
        const auto& v = row.values;
        if (v[10] <= 0.0) continue;
        Branch br;
        br.from = bus_of(v[0], row.line);
        br.to = bus_of(v[1], row.line);
        br.r = v[2];
        br.x = v[3];
        br.b = v[4];
        br.rate = v[5] > 0.0 ? v[5] / base : std::numeric_limits<double>::infinity();
        br.tap = v[8] == 0.0 ? 1.0 : v[8];
        br.shift = v[9] * kDeg;
        c.branches.push_back(br);
    }

    // Slack lookups in the sidecar need a structurally sane case first.
    validate(c);
    apply_sidecar(c, sidecar);
    validate(c);
    return c;
}

// ---------------------------------------------------------------------------
// Canonical JSON (per-unit values, internal indices)

json to_json(const NetworkCase& c) {
    json j;
    j["format"] = "gridguard-case";
    j["version"] = 1;
    j["name"] = c.name;
    j["base_mva"] = c.base_mva;
    auto num = [](double v) -> json {
        if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
        return v;
    };
    for (const auto& b : c.buses)
        j["buses"].push_back({{"id", b.id}, {"type", static_cast<int>(b.type)}, {"pd", b.pd}, {"qd", b.qd}, {"gs", b.gs},
                              {"bs", b.bs}, {"vm0", b.vm0}, {"va0", b.va0}, {"vmin", b.vmin}, {"vmax", b.vmax}});
    for (const auto& g : c.generators)
        j["generators"].push_back({{"bus", g.bus}, {"pmin", g.pmin}, {"pmax", g.pmax}, {"qmin", g.qmin}, {"qmax", g.qmax},
                                   {"vg", g.vg}, {"cost", {g.cost.c2, g.cost.c1, g.cost.c0}}});
    for (const auto& br : c.branches)
        j["branches"].push_back({{"from", br.from}, {"to", br.to}, {"r", br.r}, {"x", br.x}, {"b", br.b},
                                 {"rate", num(br.rate)}, {"tap", br.tap}, {"shift", br.shift}});
    j["bess"] = json::array();
    for (const auto& u : c.bess)
        j["bess"].push_back({{"bus", u.bus}, {"p_ch_max", u.p_ch_max}, {"p_dis_max", u.p_dis_max}, {"q_min", u.q_min},
                             {"q_max", u.q_max}, {"e_max_mwh", u.e_max_mwh}, {"eta_ch", u.eta_ch}, {"eta_dis", u.eta_dis},
                             {"soc_min", u.soc_min}, {"soc_max", u.soc_max}, {"cost_per_mw", u.cost_per_mw}});
    j["attackable"] = c.attackable;
    j["slack_cost"] = {c.slack_cost.c2, c.slack_cost.c1, c.slack_cost.c0};
    j["slack_limits"] = {num(c.slack_limits.p_min), num(c.slack_limits.p_max), num(c.slack_limits.q_min),
                         num(c.slack_limits.q_max)};
    j["penalties"] = {{"xi_line", c.penalties.xi_line}, {"xi_voltage", c.penalties.xi_voltage}};
    return j;
}

double read_num(const json& v) {
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw CaseSemanticError("unexpected string value '" + s + "'");
    }
    return v.get<double>();
}

NetworkCase from_json(const json& j) {
    NetworkCase c;
    try {
        c.name = j.value("name", "");
        c.base_mva = j.at("base_mva").get<double>();
        for (const auto& b : j.at("buses")) {
            Bus bus;
            bus.id = b.at("id").get<int>();
            bus.type = static_cast<BusType>(b.at("type").get<int>());
            bus.pd = b.at("pd").get<double>();
            bus.qd = b.at("qd").get<double>();
            bus.gs = b.at("gs").get<double>();
            bus.bs = b.at("bs").get<double>();
            bus.vm0 = b.at("vm0").get<double>();
            bus.va0 = b.at("va0").get<double>();
            bus.vmin = b.at("vmin").get<double>();
            bus.vmax = b.at("vmax").get<double>();
            c.buses.push_back(bus);
        }
        for (const auto& g : j.at("generators")) {
            Generator gen;
            gen.bus = g.at("bus").get<std::size_t>();
            gen.pmin = g.at("pmin").get<double>();
            gen.pmax = g.at("pmax").get<double>();
            gen.qmin = g.at("qmin").get<double>();
            gen.qmax = g.at("qmax").get<double>();
            gen.vg = g.at("vg").get<double>();
            gen.cost = {g.at("cost")[0].get<double>(), g.at("cost")[1].get<double>(), g.at("cost")[2].get<double>()};
            c.generators.push_back(gen);
        }
        for (const auto& b : j.at("branches")) {
            Branch br;
            br.from = b.at("from").get<std::size_t>();
            br.to = b.at("to").get<std::size_t>();
            br.r = b.at("r").get<double>();
            br.x = b.at("x").get<double>();
            br.b = b.at("b").get<double>();
            br.rate = read_num(b.at("rate"));
            br.tap = b.at("tap").get<double>();
            br.shift = b.at("shift").get<double>();
            c.branches.push_back(br);
        }
        for (const auto& u : j.at("bess")) {
            BessUnit b;
            b.bus = u.at("bus").get<std::size_t>();
            b.p_ch_max = u.at("p_ch_max").get<double>();
            b.p_dis_max = u.at("p_dis_max").get<double>();
            b.q_min = u.at("q_min").get<double>();
            b.q_max = u.at("q_max").get<double>();
            b.e_max_mwh = u.at("e_max_mwh").get<double>();
            b.eta_ch = u.at("eta_ch").get<double>();
            b.eta_dis = u.at("eta_dis").get<double>();
            b.soc_min = u.at("soc_min").get<double>();
            b.soc_max = u.at("soc_max").get<double>();
            b.cost_per_mw = u.at("cost_per_mw").get<double>();
            c.bess.push_back(b);
        }
        c.attackable = j.at("attackable").get<std::vector<std::size_t>>();
        const auto& sc = j.at("slack_cost");
        c.slack_cost = {sc[0].get<double>(), sc[1].get<double>(), sc[2].get<double>()};
        const auto& sl = j.at("slack_limits");
        c.slack_limits = {read_num(sl[0]), read_num(sl[1]), read_num(sl[2]), read_num(sl[3])};
        c.penalties = {j.at("penalties").at("xi_line").get<double>(), j.at("penalties").at("xi_voltage").get<double>()};
    } catch (const json::exception& e) {
        throw CaseSemanticError(std::string("canonical case: ") + e.what());
    }
    for (const auto& g : c.generators)
        if (g.bus >= c.n_bus()) throw CaseSemanticError("generator references unknown bus index");
    for (const auto& br : c.branches)
        if (br.from >= c.n_bus() || br.to >= c.n_bus()) throw CaseSemanticError("branch references unknown bus index");
    for (const auto& u : c.bess)
        if (u.bus >= c.n_bus()) throw CaseSemanticError("bess references unknown bus index");
    validate(c);
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t NetworkCase::slack_bus() const {
    for (std::size_t i = 0; i < buses.size(); ++i)
        if (buses[i].type == BusType::slack) return i;
    throw CaseSemanticError("case has no slack bus");
}

std::size_t NetworkCase::slack_generator() const {
    const std::size_t s = slack_bus();
    for (std::size_t g = 0; g < generators.size(); ++g)
        if (generators[g].bus == s) return g;
    throw CaseSemanticError("no generator at the slack bus");
}

std::size_t NetworkCase::bus_index(int id) const {
    for (std::size_t i = 0; i < buses.size(); ++i)
        if (buses[i].id == id) return i;
    throw CaseSemanticError("unknown bus id " + std::to_string(id));
}

void validate(const NetworkCase& c) {
    if (!(c.base_mva > 0.0)) throw CaseSemanticError("baseMVA must be positive");
    if (c.buses.empty()) throw CaseSemanticError("case has no buses");
    std::size_t slack_count = 0;
    for (const auto& b : c.buses) {
        if (b.type == BusType::slack) ++slack_count;
        if (!(b.vmin < b.vmax)) throw CaseSemanticError("bus " + std::to_string(b.id) + ": Vmin < Vmax violated");
    }
    if (slack_count != 1)
        throw CaseSemanticError("exactly one slack bus required, found " + std::to_string(slack_count));
    for (const auto& br : c.branches) {
        if (br.from >= c.n_bus() || br.to >= c.n_bus()) throw CaseSemanticError("branch endpoint references missing bus");
        if (br.r == 0.0 && br.x == 0.0) throw CaseSemanticError("branch with zero impedance");
        if (!(br.rate > 0.0)) throw CaseSemanticError("branch limit must be positive");
    }
    for (std::size_t g = 0; g < c.n_gen(); ++g) {
        const auto& gen = c.generators[g];
        if (gen.bus >= c.n_bus()) throw CaseSemanticError("generator references missing bus");
        if (!(gen.pmin <= gen.pmax)) throw CaseSemanticError("generator " + std::to_string(g) + ": pmin <= pmax violated");
        if (!(gen.qmin <= gen.qmax)) throw CaseSemanticError("generator " + std::to_string(g) + ": qmin <= qmax violated");
    }
    const std::size_t slack_gen = c.slack_generator();
    for (std::size_t k = 0; k < c.bess.size(); ++k) {
        const auto& u = c.bess[k];
        const std::string tag = "bess " + std::to_string(k) + ": ";
        if (u.bus >= c.n_bus()) throw CaseSemanticError(tag + "must map to exactly one existing bus");
        if (!(u.soc_min < u.soc_max)) throw CaseSemanticError(tag + "soc_min < soc_max violated");
        if (u.soc_min < 0.0 || u.soc_max > 1.0) throw CaseSemanticError(tag + "soc limits must lie in [0,1]");
        if (!(u.eta_ch > 0.0 && u.eta_ch <= 1.0) || !(u.eta_dis > 0.0 && u.eta_dis <= 1.0))
            throw CaseSemanticError(tag + "0 < eta <= 1 violated");
        if (!(u.e_max_mwh > 0.0)) throw CaseSemanticError(tag + "energy capacity must be positive");
        if (u.p_ch_max < 0.0 || u.p_dis_max < 0.0) throw CaseSemanticError(tag + "power limits must be nonnegative");
        if (!(u.q_min <= u.q_max)) throw CaseSemanticError(tag + "q_min <= q_max violated");
        if (u.cost_per_mw < 0.0) throw CaseSemanticError(tag + "cost must be nonnegative");
    }
    for (std::size_t g : c.attackable) {
        if (g >= c.n_gen()) throw CaseSemanticError("attackable generator index out of range");
        if (g == slack_gen) throw CaseSemanticError("the slack generator cannot be attackable");
    }
    if (c.slack_cost.c2 < 0.0 || c.slack_cost.c1 < 0.0 || c.slack_cost.c0 < 0.0)
        throw CaseSemanticError("slack cost coefficients must be nonnegative");
    if (c.penalties.xi_line < 0.0 || c.penalties.xi_voltage < 0.0)
        throw CaseSemanticError("violation penalties must be nonnegative");
}

NetworkCase parse_case(std::string_view text, std::string_view sidecar) {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string_view::npos && text[first] == '{') {
        if (!sidecar.empty()) throw CaseSemanticError("canonical case documents carry their own metadata");
        return from_json(parse_json(text, "case"));
    }
    return parse_matpower(text, sidecar);
}

NetworkCase load_case_files(const std::string& case_path, const std::string& sidecar_path) {
    const std::string text = read_file(case_path);
    const std::string sidecar = sidecar_path.empty() ? std::string{} : read_file(sidecar_path);
    NetworkCase c = parse_case(text, sidecar);
    if (c.name.empty()) {
        auto slash = case_path.find_last_of('/');
        std::string stem = case_path.substr(slash == std::string::npos ? 0 : slash + 1);
        c.name = stem.substr(0, stem.find('.'));
    }
    return c;
}

std::string data_dir() {
    if (const char* env = std::getenv("GRIDGUARD_DATA")) return env;
    return GRIDGUARD_DATA_DIR;
}

NetworkCase load_case(const std::string& name_or_path) {
    if (ends_with(name_or_path, ".json")) return load_case_files(name_or_path, "");
    std::string path = name_or_path;
    if (!ends_with(path, ".m")) path = data_dir() + "/" + name_or_path + ".m";
    std::string sidecar = path.substr(0, path.size() - 2) + ".sidecar.json";
    if (!std::ifstream(sidecar)) sidecar.clear();
    return load_case_files(path, sidecar);
}

std::string serialize_case(const NetworkCase& c) { return to_json(c).dump(1); }

// ---------------------------------------------------------------------------

AdmittanceMatrix::AdmittanceMatrix(const NetworkCase& c) {
    const auto n = static_cast<Eigen::Index>(c.n_bus());
    y_ = Eigen::MatrixXcd::Zero(n, n);
    branch_.reserve(c.n_branch());
    for (const auto& br : c.branches) {
        const std::complex<double> ys = 1.0 / std::complex<double>(br.r, br.x);
        const std::complex<double> tap = std::polar(br.tap, br.shift);
        const std::complex<double> ytt = ys + std::complex<double>(0.0, br.b / 2.0);
        BranchAdmittance a{ytt / std::norm(tap), -ys / std::conj(tap), -ys / tap, ytt};
        const auto f = static_cast<Eigen::Index>(br.from);
        const auto t = static_cast<Eigen::Index>(br.to);
        y_(f, f) += a.yff;
        y_(f, t) += a.yft;
        y_(t, f) += a.ytf;
        y_(t, t) += a.ytt;
        branch_.push_back(a);
    }
    for (Eigen::Index i = 0; i < n; ++i) y_(i, i) += std::complex<double>(c.buses[i].gs, c.buses[i].bs);
    g_ = y_.real();
    b_ = y_.imag();
    mag_ = y_.cwiseAbs();
    ang_.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index k = 0; k < n; ++k) ang_(i, k) = std::arg(y_(i, k));
}

// ---------------------------------------------------------------------------

LoadProfile::LoadProfile(Eigen::MatrixXd factors) : f_(std::move(factors)) {
    if (static_cast<std::size_t>(f_.rows()) != kHours)
        throw std::invalid_argument("load profile must have exactly " + std::to_string(kHours) + " hours");
    if (!(f_.array() > 0.0).all() || !f_.allFinite()) throw std::invalid_argument("load profile factors must be positive");
}

LoadProfile LoadProfile::constant(std::size_t n_bus, double factor) {
    return LoadProfile(Eigen::MatrixXd::Constant(kHours, static_cast<Eigen::Index>(n_bus), factor));
}

LoadProfile load_profile(std::string_view csv, const NetworkCase& c) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> lines;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
        std::size_t end = csv.find('\n', pos);
        if (end == std::string_view::npos) end = csv.size();
        std::string_view line = csv.substr(pos, end - pos);
        ++line_no;
        pos = end + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
        std::vector<std::string> cells;
        std::size_t cpos = 0;
        while (true) {
            std::size_t comma = line.find(',', cpos);
            std::string cell(line.substr(cpos, comma == std::string_view::npos ? std::string_view::npos : comma - cpos));
            cell.erase(0, cell.find_first_not_of(" \t"));
            cell.erase(cell.find_last_not_of(" \t") + 1);
            cells.push_back(cell);
            if (comma == std::string_view::npos) break;
            cpos = comma + 1;
        }
        rows.push_back(std::move(cells));
        lines.push_back(line_no);
    }
    if (rows.empty()) throw CaseSyntaxError(1, "empty load profile");
    const auto& header = rows.front();
    if (header.size() < 2) throw CaseSyntaxError(lines.front(), "profile header needs an hour column and at least one factor column");

    // Column -> bus index, or npos for a system-wide factor.
    std::vector<std::size_t> column_bus;
    const bool system_wide = header.size() == 2 && (header[1] == "factor" || header[1] == "scale" || header[1] == "system");
    for (std::size_t k = 1; k < header.size(); ++k) {
        if (system_wide) {
            column_bus.push_back(std::string::npos);
        } else {
            int id = 0;
            auto [p, ec] = std::from_chars(header[k].data(), header[k].data() + header[k].size(), id);
            if (ec != std::errc() || p != header[k].data() + header[k].size())
                throw CaseSyntaxError(lines.front(), "profile column '" + header[k] + "' is not a bus id");
            column_bus.push_back(c.bus_index(id));
        }
    }

    const std::size_t data_rows = rows.size() - 1;
    if (data_rows != LoadProfile::kHours)
        throw CaseSyntaxError(lines.back(), "expected " + std::to_string(LoadProfile::kHours) + " hourly rows, found " +
                                                std::to_string(data_rows));
    Eigen::MatrixXd f = Eigen::MatrixXd::Ones(LoadProfile::kHours, static_cast<Eigen::Index>(c.n_bus()));
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& cells = rows[r];
        if (cells.size() != header.size()) throw CaseSyntaxError(lines[r], "column count differs from header");
        const double hour = parse_number(cells[0], lines[r]);
        if (hour != static_cast<double>(r))
            throw CaseSyntaxError(lines[r], "expected hour " + std::to_string(r) + ", found " + cells[0]);
        for (std::size_t k = 1; k < cells.size(); ++k) {
            const double v = parse_number(cells[k], lines[r]);
            if (!(v > 0.0) || !std::isfinite(v)) throw CaseSyntaxError(lines[r], "profile factors must be positive");
            if (column_bus[k - 1] == std::string::npos)
                f.row(static_cast<Eigen::Index>(r - 1)).setConstant(v);
            else
                f(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(column_bus[k - 1])) = v;
        }
    }
    return LoadProfile(std::move(f));
}

LoadProfile load_profile_file(const std::string& path, const NetworkCase& c) { return load_profile(read_file(path), c); }

Demand base_demand(const NetworkCase& c) {
    Demand d{Eigen::VectorXd(c.n_bus()), Eigen::VectorXd(c.n_bus())};
    for (std::size_t i = 0; i < c.n_bus(); ++i) {
        d.pd[i] = c.buses[i].pd;
        d.qd[i] = c.buses[i].qd;
    }
    return d;
}

Demand demand_at(const NetworkCase& c, const LoadProfile& profile, std::size_t t) {
    if (static_cast<std::size_t>(profile.factors().cols()) != c.n_bus())
        throw std::invalid_argument("load profile does not match the case bus count");
    Demand d = base_demand(c);
    for (std::size_t i = 0; i < c.n_bus(); ++i) {
        d.pd[i] *= profile.factor(t, i);
        d.qd[i] *= profile.factor(t, i);
    }
    return d;
}

}  // namespace gridguard
