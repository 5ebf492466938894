#pragma once

// System specification DSL: value types, parser, validator, canonical writer.
//
//   system "S1"
//   node C kind=covariate dist=bernoulli(0.5)
//   node A kind=exposure given=(C) dist=table{0: bernoulli(0.3); 1: bernoulli(0.7)}
//   node Y kind=outcome given=(A, C) dist=table{0,0: bernoulli(0.2); 0,1: bernoulli(0.5); ...}
//
// Parameter layout per family, with k = number of parents for the direct form
// and k = 0 inside table rows:
//   bernoulli(p)
//   categorical(p0, ..., pm)
//   gaussian(intercept, b1..bk, sd)                 mean linear in parent values
//   exponential-hazard(rate, b1..bk)                rate * exp(sum b_j x_j)
//   gamma-frailty(variance)                         mean-one gamma
//   linear-gaussian-step(init_mean, init_sd, drift, b1..bk, noise_sd)

#include "causlab/util.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace causlab {

enum class NodeKind { covariate, exposure, outcome, frailty, process, death };

enum class Family {
    bernoulli,
    categorical,
    gaussian,
    exponential_hazard,
    gamma_frailty,
    linear_gaussian_step
};

inline constexpr std::string_view to_string(NodeKind k) noexcept {
    switch (k) {
    case NodeKind::covariate: return "covariate";
    case NodeKind::exposure: return "exposure";
    case NodeKind::outcome: return "outcome";
    case NodeKind::frailty: return "frailty";
    case NodeKind::process: return "process";
    case NodeKind::death: return "death";
    }
    return "?";
}

inline constexpr std::string_view to_string(Family f) noexcept {
    switch (f) {
    case Family::bernoulli: return "bernoulli";
    case Family::categorical: return "categorical";
    case Family::gaussian: return "gaussian";
    case Family::exponential_hazard: return "exponential-hazard";
    case Family::gamma_frailty: return "gamma-frailty";
    case Family::linear_gaussian_step: return "linear-gaussian-step";
    }
    return "?";
}

inline std::optional<NodeKind> parse_kind(std::string_view s) noexcept {
    for (auto k : {NodeKind::covariate, NodeKind::exposure, NodeKind::outcome, NodeKind::frailty,
                   NodeKind::process, NodeKind::death})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

inline std::optional<Family> parse_family(std::string_view s) noexcept {
    for (auto f : {Family::bernoulli, Family::categorical, Family::gaussian,
                   Family::exponential_hazard, Family::gamma_frailty, Family::linear_gaussian_step})
        if (to_string(f) == s) return f;
    return std::nullopt;
}

/// Random-variable nodes form a DAG; process and death nodes evolve in time.
inline constexpr bool is_variable_kind(NodeKind k) noexcept {
    return k != NodeKind::process && k != NodeKind::death;
}

inline constexpr bool is_discrete_family(Family f) noexcept {
    return f == Family::bernoulli || f == Family::categorical;
}

struct TableRow {
    std::vector<int> pattern;
    std::vector<double> params;
    bool operator==(const TableRow &) const = default;
};

struct DistSpec {
    Family family = Family::bernoulli;
    std::vector<double> params;
    std::vector<TableRow> table; ///< non-empty selects the conditional-table form

    bool is_table() const noexcept { return !table.empty(); }
    bool operator==(const DistSpec &) const = default;

    static DistSpec direct(Family f, std::vector<double> p) { return {f, std::move(p), {}}; }
    static DistSpec tabular(Family f, std::vector<TableRow> rows) { return {f, {}, std::move(rows)}; }
};

struct NodeSpec {
    std::string name;
    NodeKind kind = NodeKind::covariate;
    std::vector<std::string> parents;
    DistSpec dist;
    bool operator==(const NodeSpec &) const = default;
};

struct Regime {
    enum class Kind { observational, experimental };
    Kind kind = Kind::observational;
    std::string exposure; ///< intervened node when experimental
    bool operator==(const Regime &) const = default;
};

struct SystemSpec {
    std::string name;
    std::vector<NodeSpec> nodes;
    Regime regime;

    bool operator==(const SystemSpec &) const = default;

    std::optional<std::size_t> index_of(std::string_view node) const noexcept {
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i].name == node) return i;
        return std::nullopt;
    }
    const NodeSpec *find(std::string_view node) const noexcept {
        auto i = index_of(node);
        return i ? &nodes[*i] : nullptr;
    }
};

/// Number of outcomes of a discrete distribution (max over table rows); 0 if continuous.
inline std::size_t support_size(const DistSpec &d) noexcept {
    if (!is_discrete_family(d.family)) return 0;
    auto one = [&](const std::vector<double> &p) -> std::size_t {
        return d.family == Family::bernoulli ? 2 : p.size();
    };
    if (!d.is_table()) return one(d.params);
    std::size_t m = 0;
    for (const auto &r : d.table) m = std::max(m, one(r.params));
    return m;
}

/// Expected parameter count; `linear_terms` is the parent count for the direct form, 0 in rows.
/// Returns nullopt for categorical, which takes any positive count.
inline std::optional<std::size_t> expected_arity(Family f, std::size_t linear_terms) noexcept {
    switch (f) {
    case Family::bernoulli: return 1;
    case Family::categorical: return std::nullopt;
    case Family::gaussian: return 2 + linear_terms;
    case Family::exponential_hazard: return 1 + linear_terms;
    case Family::gamma_frailty: return 1;
    case Family::linear_gaussian_step: return 4 + linear_terms;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Parsing

class ParseError : public Error {
  public:
    ParseError(std::size_t line, std::size_t column, const std::string &message)
        : Error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " +
                message),
          line_(line), column_(column), message_(message) {}

    std::size_t line() const noexcept { return line_; }
    std::size_t column() const noexcept { return column_; }
    const std::string &message() const noexcept { return message_; }

  private:
    std::size_t line_;
    std::size_t column_;
    std::string message_;
};

namespace detail {

struct Token {
    enum class Type { word, number, string, punct, end };
    Type type = Type::end;
    std::string text;
    double number = 0.0;
    std::size_t column = 0;
};

class LineLexer {
  public:
    LineLexer(std::string_view line, std::size_t line_no) : line_no_(line_no) {
        std::size_t i = 0;
        while (i < line.size()) {
            const char c = line[i];
            if (c == ' ' || c == '\t' || c == '\r') {
                ++i;
                continue;
            }
            if (c == '#') break;
            Token t;
            t.column = column_of(line, i);
            if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
                std::size_t j = i + 1;
                while (j < line.size() && (std::isalnum(static_cast<unsigned char>(line[j])) ||
                                           line[j] == '_' || line[j] == '-'))
                    ++j;
                t.type = Token::Type::word;
                t.text = std::string(line.substr(i, j - i));
                i = j;
            } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' ||
                       ((c == '-' || c == '+') && i + 1 < line.size() &&
                        (std::isdigit(static_cast<unsigned char>(line[i + 1])) ||
                         line[i + 1] == '.'))) {
                const char *first = line.data() + i + (c == '+' ? 1 : 0);
                const char *last = line.data() + line.size();
                double v = 0.0;
                auto res = std::from_chars(first, last, v);
                if (res.ec != std::errc()) throw ParseError(line_no_, t.column, "malformed number");
                t.type = Token::Type::number;
                t.number = v;
                t.text = std::string(line.substr(i, static_cast<std::size_t>(res.ptr - line.data()) - i));
                i = static_cast<std::size_t>(res.ptr - line.data());
                if (i < line.size() && (std::isalpha(static_cast<unsigned char>(line[i])) || line[i] == '_'))
                    throw ParseError(line_no_, t.column, "malformed number");
            } else if (c == '"') {
                std::size_t j = i + 1;
                std::string s;
                bool closed = false;
                while (j < line.size()) {
                    if (line[j] == '\\' && j + 1 < line.size()) {
                        s.push_back(line[j + 1]);
                        j += 2;
                        continue;
                    }
                    if (line[j] == '"') {
                        closed = true;
                        ++j;
                        break;
                    }
                    s.push_back(line[j++]);
                }
                if (!closed) throw ParseError(line_no_, t.column, "unterminated string");
                t.type = Token::Type::string;
                t.text = std::move(s);
                i = j;
            } else if (std::string_view("=(){}:;,").find(c) != std::string_view::npos) {
                t.type = Token::Type::punct;
                t.text = std::string(1, c);
                ++i;
            } else {
                throw ParseError(line_no_, t.column, std::string("unexpected character '") + c + "'");
            }
            tokens_.push_back(std::move(t));
        }
        Token end;
        end.type = Token::Type::end;
        end.column = column_of(line, std::min(i, line.size()));
        tokens_.push_back(end);
    }

    bool empty() const noexcept { return tokens_.size() == 1; }
    const Token &peek() const noexcept { return tokens_[pos_]; }
    Token next() { return tokens_[pos_ < tokens_.size() - 1 ? pos_++ : pos_]; }

    [[noreturn]] void fail(const Token &at, const std::string &msg) const {
        throw ParseError(line_no_, at.column, msg);
    }

    Token expect_word(std::string_view what) {
        Token t = next();
        if (t.type != Token::Type::word) fail(t, "expected " + std::string(what));
        return t;
    }
    void expect_keyword(std::string_view kw) {
        Token t = next();
        if (t.type != Token::Type::word || t.text != kw) fail(t, "expected '" + std::string(kw) + "'");
    }
    void expect_punct(char p) {
        Token t = next();
        if (t.type != Token::Type::punct || t.text[0] != p) fail(t, std::string("expected '") + p + "'");
    }
    bool accept_punct(char p) {
        if (peek().type == Token::Type::punct && peek().text[0] == p) {
            ++pos_;
            return true;
        }
        return false;
    }
    Token expect_ident() {
        Token t = expect_word("identifier");
        if (t.text.find('-') != std::string::npos) fail(t, "invalid identifier '" + t.text + "'");
        return t;
    }
    void expect_end() {
        if (peek().type != Token::Type::end) fail(peek(), "unexpected '" + peek().text + "'");
    }
    std::size_t line_no() const noexcept { return line_no_; }

  private:
    static std::size_t column_of(std::string_view line, std::size_t byte) noexcept {
        std::size_t col = 1;
        for (std::size_t i = 0; i < byte && i < line.size(); ++i)
            if ((static_cast<unsigned char>(line[i]) & 0xC0) != 0x80) ++col;
        return col;
    }

    std::vector<Token> tokens_;
    std::size_t pos_ = 0;
    std::size_t line_no_;
};

inline std::vector<double> parse_params(LineLexer &lx) {
    std::vector<double> params;
    lx.expect_punct('(');
    if (lx.accept_punct(')')) return params;
    for (;;) {
        Token t = lx.next();
        if (t.type != Token::Type::number) lx.fail(t, "malformed parameter");
        if (!std::isfinite(t.number)) lx.fail(t, "malformed parameter");
        params.push_back(t.number);
        if (lx.accept_punct(')')) break;
        lx.expect_punct(',');
    }
    return params;
}

inline Family parse_family_token(LineLexer &lx) {
    Token t = lx.expect_word("distribution family");
    auto f = parse_family(t.text);
    if (!f) lx.fail(t, "unknown distribution family '" + t.text + "'");
    return *f;
}

inline void check_arity(LineLexer &lx, const Token &at, Family f, std::size_t linear_terms,
                        std::size_t got) {
    auto want = expected_arity(f, linear_terms);
    if ((want && *want != got) || (!want && got == 0))
        lx.fail(at, "malformed parameter: " + std::string(to_string(f)) + " expects " +
                        (want ? std::to_string(*want) : std::string("at least 1")) +
                        " parameter(s), got " + std::to_string(got));
}

inline DistSpec parse_dist(LineLexer &lx, std::size_t n_parents) {
    const Token head = lx.peek();
    if (head.type == Token::Type::word && head.text == "table") {
        lx.next();
        lx.expect_punct('{');
        std::vector<TableRow> rows;
        std::optional<Family> family;
        for (;;) {
            TableRow row;
            const Token row_start = lx.peek();
            for (;;) {
                Token t = lx.next();
                if (t.type != Token::Type::number || t.number != std::floor(t.number) ||
                    std::abs(t.number) > 1e9)
                    lx.fail(t, "malformed table pattern");
                row.pattern.push_back(static_cast<int>(t.number));
                if (!lx.accept_punct(',')) break;
            }
            if (row.pattern.size() != n_parents)
                lx.fail(row_start, "table pattern has " + std::to_string(row.pattern.size()) +
                                       " value(s) for " + std::to_string(n_parents) + " parent(s)");
            lx.expect_punct(':');
            const Token fam_tok = lx.peek();
            Family f = parse_family_token(lx);
            if (family && *family != f) lx.fail(fam_tok, "table rows must share one family");
            family = f;
            const Token params_tok = lx.peek();
            row.params = parse_params(lx);
            check_arity(lx, params_tok, f, 0, row.params.size());
            rows.push_back(std::move(row));
            if (lx.accept_punct('}')) break;
            lx.expect_punct(';');
        }
        return DistSpec::tabular(*family, std::move(rows));
    }
    Family f = parse_family_token(lx);
    const Token params_tok = lx.peek();
    auto params = parse_params(lx);
    check_arity(lx, params_tok, f, n_parents, params.size());
    return DistSpec::direct(f, std::move(params));
}

} // namespace detail

/// Parses a DSL document into a fully resolved spec, or throws ParseError.
/// Semantic rules (row sums, domains, acyclicity) are left to validate().
inline SystemSpec parse_system(std::string_view text) {
    using detail::LineLexer;
    using detail::Token;

    SystemSpec spec;
    bool have_header = false;
    struct Pending {
        std::size_t node;
        std::string parent;
        std::size_t line;
        std::size_t column;
    };
    std::vector<Pending> deferred;
    std::vector<std::size_t> node_lines;
    std::optional<std::pair<Token, std::size_t>> regime_exposure;

    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t stop = text.find('\n', start);
        if (stop == std::string_view::npos) stop = text.size();
        std::string_view line = text.substr(start, stop - start);
        start = stop + 1;
        ++line_no;

        LineLexer lx(line, line_no);
        if (lx.empty()) {
            if (stop == text.size()) break;
            continue;
        }
        if (!have_header) {
            lx.expect_keyword("system");
            Token name = lx.next();
            if (name.type != Token::Type::string) lx.fail(name, "expected quoted system name");
            spec.name = name.text;
            if (lx.peek().type == Token::Type::word && lx.peek().text == "regime") {
                lx.next();
                lx.expect_punct('=');
                Token r = lx.expect_word("regime");
                if (r.text == "observational") {
                    spec.regime = {};
                } else if (r.text == "experimental") {
                    lx.expect_punct('(');
                    Token e = lx.expect_ident();
                    lx.expect_punct(')');
                    spec.regime = {Regime::Kind::experimental, e.text};
                    regime_exposure = {e, line_no};
                } else {
                    lx.fail(r, "unknown regime '" + r.text + "'");
                }
            }
            lx.expect_end();
            have_header = true;
        } else {
            lx.expect_keyword("node");
            Token name = lx.expect_ident();
            if (spec.index_of(name.text)) lx.fail(name, "duplicate name " + name.text);
            NodeSpec node;
            node.name = name.text;
            lx.expect_keyword("kind");
            lx.expect_punct('=');
            Token kind_tok = lx.expect_word("node kind");
            auto kind = parse_kind(kind_tok.text);
            if (!kind) lx.fail(kind_tok, "unknown node kind '" + kind_tok.text + "'");
            node.kind = *kind;

            Token t = lx.expect_word("'given' or 'dist'");
            if (t.text == "given") {
                lx.expect_punct('=');
                lx.expect_punct('(');
                if (!lx.accept_punct(')')) {
                    for (;;) {
                        Token p = lx.expect_ident();
                        if (std::find(node.parents.begin(), node.parents.end(), p.text) !=
                            node.parents.end())
                            lx.fail(p, "duplicate parent " + p.text);
                        if (!spec.index_of(p.text)) {
                            if (is_variable_kind(node.kind)) lx.fail(p, "unknown parent " + p.text);
                            deferred.push_back({spec.nodes.size(), p.text, line_no, p.column});
                        }
                        node.parents.push_back(p.text);
                        if (lx.accept_punct(')')) break;
                        lx.expect_punct(',');
                    }
                }
                t = lx.expect_word("'dist'");
            }
            if (t.text != "dist") lx.fail(t, "expected 'dist'");
            lx.expect_punct('=');
            node.dist = detail::parse_dist(lx, node.parents.size());
            lx.expect_end();
            spec.nodes.push_back(std::move(node));
            node_lines.push_back(line_no);
        }
        if (stop == text.size()) break;
    }
    if (!have_header) throw ParseError(line_no == 0 ? 1 : line_no, 1, "missing 'system' header");

    for (const auto &d : deferred)
        if (!spec.index_of(d.parent)) throw ParseError(d.line, d.column, "unknown parent " + d.parent);
    if (regime_exposure && !spec.index_of(regime_exposure->first.text))
        throw ParseError(regime_exposure->second, regime_exposure->first.column,
                         "unknown node " + regime_exposure->first.text);
    return spec;
}

// ---------------------------------------------------------------------------
// Validation

struct Diagnostic {
    std::string node; ///< empty for system-level findings
    std::string rule;
    std::string message;
    bool operator==(const Diagnostic &) const = default;
};

/// Checks every structural and parameter invariant; an empty result means the spec is valid.
inline std::vector<Diagnostic> validate(const SystemSpec &spec) {
    std::vector<Diagnostic> out;
    auto report = [&](const std::string &node, std::string rule, std::string msg) {
        out.push_back({node, std::move(rule), std::move(msg)});
    };

    std::map<std::string, std::size_t> first_index;
    for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
        const auto &n = spec.nodes[i];
        if (!first_index.emplace(n.name, i).second)
            report(n.name, "duplicate-name", "duplicate name " + n.name);
    }

    std::size_t deaths = 0;
    for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
        const auto &n = spec.nodes[i];
        const auto &d = n.dist;
        const bool variable = is_variable_kind(n.kind);
        if (n.kind == NodeKind::death) ++deaths;

        std::set<std::string> seen;
        for (const auto &p : n.parents) {
            if (!seen.insert(p).second) report(n.name, "duplicate-parent", "duplicate parent " + p);
            auto it = first_index.find(p);
            if (it == first_index.end()) {
                report(n.name, "unknown-parent", "unknown parent " + p);
                continue;
            }
            const auto &pn = spec.nodes[it->second];
            if (!variable) continue;
            if (pn.kind == NodeKind::death) {
                report(pn.name, "death-has-variable-child",
                       "death node " + pn.name + " has child " + n.name + " of kind " +
                           std::string(to_string(n.kind)));
            } else if (!is_variable_kind(pn.kind)) {
                report(n.name, "process-parent",
                       "variable node " + n.name + " cannot depend on process " + p);
            } else if (it->second >= i) {
                report(n.name, "forward-reference", "parent " + p + " is not declared before " + n.name);
            }
        }

        if (n.kind == NodeKind::frailty && !n.parents.empty())
            report(n.name, "frailty-has-parents", "frailty node " + n.name + " has parents");
        if (n.kind == NodeKind::process && d.family != Family::linear_gaussian_step)
            report(n.name, "kind-family", "process nodes use linear-gaussian-step");
        if (n.kind != NodeKind::process && d.family == Family::linear_gaussian_step)
            report(n.name, "kind-family", "linear-gaussian-step is reserved for process nodes");
        if (n.kind == NodeKind::death && d.family != Family::exponential_hazard)
            report(n.name, "kind-family", "death nodes use exponential-hazard");
        if (d.family == Family::gamma_frailty && !n.parents.empty())
            report(n.name, "kind-family", "gamma-frailty takes no parents");

        auto check_params = [&](const std::vector<double> &p, std::size_t linear_terms,
                                const std::string &where) {
            auto want = expected_arity(d.family, linear_terms);
            if ((want && p.size() != *want) || (!want && p.empty())) {
                report(n.name, "param-arity",
                       where + std::string(to_string(d.family)) + " expects " +
                           (want ? std::to_string(*want) : std::string("at least 1")) +
                           " parameter(s), got " + std::to_string(p.size()));
                return;
            }
            for (double v : p)
                if (!std::isfinite(v)) {
                    report(n.name, "param-domain", where + "non-finite parameter");
                    return;
                }
            auto domain = [&](bool ok, const std::string &what) {
                if (!ok) report(n.name, "param-domain", where + what);
            };
            switch (d.family) {
            case Family::bernoulli:
                domain(p[0] >= 0.0 && p[0] <= 1.0, "probability outside [0,1]");
                break;
            case Family::categorical: {
                double sum = 0.0;
                bool in_range = true;
                for (double v : p) {
                    in_range = in_range && v >= 0.0 && v <= 1.0;
                    sum += v;
                }
                domain(in_range, "probability outside [0,1]");
                if (std::abs(sum - 1.0) > 1e-12)
                    report(n.name, "row-sum", where + "row sum ≠ 1 (" + detail::format_double(sum) + ")");
                break;
            }
            case Family::gaussian: domain(p.back() >= 0.0, "standard deviation < 0"); break;
            case Family::exponential_hazard:
                if (n.kind == NodeKind::death)
                    domain(p[0] >= 0.0, "hazard rate < 0");
                else
                    domain(p[0] > 0.0, "rate must be > 0");
                break;
            case Family::gamma_frailty: domain(p[0] >= 0.0, "frailty variance < 0"); break;
            case Family::linear_gaussian_step:
                domain(p[1] >= 0.0 && p.back() >= 0.0, "standard deviation < 0");
                break;
            }
        };

        if (!d.is_table()) {
            check_params(d.params, n.parents.size(), "");
            continue;
        }

        if (n.parents.empty()) report(n.name, "table-without-parents", "conditional table without parents");
        if (d.family == Family::linear_gaussian_step || d.family == Family::gamma_frailty)
            report(n.name, "kind-family", std::string(to_string(d.family)) + " cannot be tabulated");

        std::vector<std::size_t> parent_support;
        bool all_discrete = true;
        for (const auto &p : n.parents) {
            auto it = first_index.find(p);
            std::size_t s = 0;
            if (it != first_index.end() && is_variable_kind(spec.nodes[it->second].kind))
                s = support_size(spec.nodes[it->second].dist);
            parent_support.push_back(s);
            all_discrete = all_discrete && s > 0;
        }

        std::set<std::vector<int>> patterns;
        for (const auto &row : d.table) {
            std::string where = "row ";
            for (std::size_t j = 0; j < row.pattern.size(); ++j)
                where += (j ? "," : "") + std::to_string(row.pattern[j]);
            where += ": ";
            if (row.pattern.size() != n.parents.size()) {
                report(n.name, "pattern-arity", where + "pattern length differs from parent count");
                continue;
            }
            if (!patterns.insert(row.pattern).second)
                report(n.name, "duplicate-pattern", where + "duplicate pattern");
            for (std::size_t j = 0; j < row.pattern.size(); ++j)
                if (parent_support[j] > 0 &&
                    (row.pattern[j] < 0 || static_cast<std::size_t>(row.pattern[j]) >= parent_support[j]))
                    report(n.name, "pattern-out-of-support",
                           where + "value " + std::to_string(row.pattern[j]) + " outside support of " +
                               n.parents[j]);
            check_params(row.params, 0, where);
        }

        if (all_discrete && !n.parents.empty()) {
            std::vector<int> cur(n.parents.size(), 0);
            for (;;) {
                if (!patterns.count(cur)) {
                    std::string pat;
                    for (std::size_t j = 0; j < cur.size(); ++j)
                        pat += (j ? "," : "") + std::to_string(cur[j]);
                    report(n.name, "missing-row", "no table row for parent values " + pat);
                }
                std::size_t j = cur.size();
                while (j > 0) {
                    --j;
                    if (static_cast<std::size_t>(++cur[j]) < parent_support[j]) break;
                    cur[j] = 0;
                    if (j == 0) goto enumerated;
                }
            }
        enumerated:;
        }
    }

    if (deaths > 1) report("", "multiple-death", "more than one death node");

    // Cycle search over the variable-node subgraph, independent of declaration order.
    {
        const std::size_t n = spec.nodes.size();
        std::vector<int> state(n, 0);
        std::vector<std::size_t> stack;
        std::function<bool(std::size_t)> visit = [&](std::size_t v) -> bool {
            state[v] = 1;
            stack.push_back(v);
            for (const auto &p : spec.nodes[v].parents) {
                auto it = first_index.find(p);
                if (it == first_index.end() || !is_variable_kind(spec.nodes[it->second].kind)) continue;
                const std::size_t u = it->second;
                if (state[u] == 1) {
                    std::string cycle;
                    auto pos = std::find(stack.begin(), stack.end(), u);
                    for (auto s = pos; s != stack.end(); ++s)
                        cycle += (s == pos ? "" : ", ") + spec.nodes[*s].name;
                    report(spec.nodes[u].name, "cycle", "cycle among variable nodes: " + cycle);
                    return true;
                }
                if (state[u] == 0 && visit(u)) return true;
            }
            stack.pop_back();
            state[v] = 2;
            return false;
        };
        for (std::size_t v = 0; v < n; ++v)
            if (is_variable_kind(spec.nodes[v].kind) && state[v] == 0 && visit(v)) break;
    }

    if (spec.regime.kind == Regime::Kind::experimental) {
        const auto *e = spec.find(spec.regime.exposure);
        if (!e)
            report(spec.regime.exposure, "regime", "experimental regime names unknown node");
        else if (e->kind != NodeKind::exposure || !e->parents.empty() || e->dist.is_table())
            report(e->name, "regime", "intervened node must be a parentless exposure");
    }
    return out;
}

class SpecError : public Error {
  public:
    explicit SpecError(std::vector<Diagnostic> diags)
        : Error(summarize(diags)), diagnostics_(std::move(diags)) {}
    const std::vector<Diagnostic> &diagnostics() const noexcept { return diagnostics_; }

  private:
    static std::string summarize(const std::vector<Diagnostic> &diags) {
        std::string s = "invalid system:";
        for (const auto &d : diags) s += "\n  " + (d.node.empty() ? "" : d.node + ": ") + d.message;
        return s;
    }
    std::vector<Diagnostic> diagnostics_;
};

/// parse_system followed by validate; throws SpecError when diagnostics remain.
inline SystemSpec load_system(std::string_view text) {
    SystemSpec spec = parse_system(text);
    if (auto diags = validate(spec); !diags.empty()) throw SpecError(std::move(diags));
    return spec;
}

inline SystemSpec load_system_file(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open spec file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return load_system(ss.str());
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline std::string format_params(const std::vector<double> &p) {
    std::string s = "(";
    for (std::size_t i = 0; i < p.size(); ++i) s += (i ? ", " : "") + format_double(p[i], 17);
    return s + ")";
}

inline std::string quote(std::string_view s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    return out + "\"";
}

} // namespace detail

/// Canonical text: declaration order, parameters at 17 significant digits, LF endings.
inline std::string serialize(const SystemSpec &spec) {
    std::string out = "system " + detail::quote(spec.name);
    if (spec.regime.kind == Regime::Kind::experimental)
        out += " regime=experimental(" + spec.regime.exposure + ")";
    out += "\n";
    for (const auto &n : spec.nodes) {
        out += "node " + n.name + " kind=" + std::string(to_string(n.kind));
        if (!n.parents.empty()) {
            out += " given=(";
            for (std::size_t i = 0; i < n.parents.size(); ++i) out += (i ? ", " : "") + n.parents[i];
            out += ")";
        }
        out += " dist=";
        const auto family = std::string(to_string(n.dist.family));
        if (!n.dist.is_table()) {
            out += family + detail::format_params(n.dist.params);
        } else {
            out += "table{";
            for (std::size_t r = 0; r < n.dist.table.size(); ++r) {
                const auto &row = n.dist.table[r];
                if (r) out += "; ";
                for (std::size_t j = 0; j < row.pattern.size(); ++j)
                    out += (j ? "," : "") + std::to_string(row.pattern[j]);
                out += ": " + family + detail::format_params(row.params);
            }
            out += "}";
        }
        out += "\n";
    }
    return out;
}

/// Hex FNV-1a of the canonical serialization.
inline std::string spec_hash(const SystemSpec &spec) { return detail::hex64(detail::fnv1a(serialize(spec))); }

} // namespace causlab
