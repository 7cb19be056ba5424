#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gridguard {

/// Raised for malformed case text. Carries the 1-based line of the offending input.
class CaseSyntaxError : public std::runtime_error {
public:
    CaseSyntaxError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Raised when a syntactically valid case violates a structural invariant.
class CaseSemanticError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class BusType { pq = 1, pv = 2, slack = 3 };

/// Quadratic cost c2*p^2 + c1*p + c0 with p in MW.
struct QuadraticCost {
    double c2 = 0.0;
    double c1 = 0.0;
    double c0 = 0.0;

    double operator()(double p_mw) const { return (c2 * p_mw + c1) * p_mw + c0; }
    double marginal(double p_mw) const { return 2.0 * c2 * p_mw + c1; }
    bool operator==(const QuadraticCost&) const = default;
};

// All electrical quantities below are per-unit on NetworkCase::base_mva.

struct Bus {
    int id = 0;  // external bus number
    BusType type = BusType::pq;
    double pd = 0.0;
    double qd = 0.0;
    double gs = 0.0;
    double bs = 0.0;
    double vm0 = 1.0;
    double va0 = 0.0;  // rad
    double vmin = 0.95;
    double vmax = 1.05;
    bool operator==(const Bus&) const = default;
};

struct Generator {
    std::size_t bus = 0;  // internal bus index
    double pmin = 0.0;
    double pmax = 0.0;
    double qmin = 0.0;
    double qmax = 0.0;
    double vg = 1.0;
    QuadraticCost cost;
    bool operator==(const Generator&) const = default;
};

struct Branch {
    std::size_t from = 0;
    std::size_t to = 0;
    double r = 0.0;
    double x = 0.0;
    double b = 0.0;
    double rate = std::numeric_limits<double>::infinity();  // apparent-power limit
    double tap = 1.0;
    double shift = 0.0;  // rad
    bool operator==(const Branch&) const = default;
};

struct BessUnit {
    std::size_t bus = 0;
    double p_ch_max = 0.0;
    double p_dis_max = 0.0;
    double q_min = 0.0;
    double q_max = 0.0;
    double e_max_mwh = 0.0;
    double eta_ch = 1.0;
    double eta_dis = 1.0;
    double soc_min = 0.0;
    double soc_max = 1.0;
    double cost_per_mw = 0.0;  // $/MW of throughput
    bool operator==(const BessUnit&) const = default;
};

struct SlackLimits {
    double p_min = -std::numeric_limits<double>::infinity();
    double p_max = std::numeric_limits<double>::infinity();
    double q_min = -std::numeric_limits<double>::infinity();
    double q_max = std::numeric_limits<double>::infinity();
    bool operator==(const SlackLimits&) const = default;
};

/// Violation weights in $ per p.u. of the worst line / voltage excess.
struct Penalties {
    double xi_line = 100.0;
    double xi_voltage = 100.0;
    bool operator==(const Penalties&) const = default;
};

/// Immutable, validated grid description.
struct NetworkCase {
    std::string name;
    double base_mva = 100.0;
    std::vector<Bus> buses;
    std::vector<Generator> generators;
    std::vector<Branch> branches;
    std::vector<BessUnit> bess;
    std::vector<std::size_t> attackable;  // generator indices
    QuadraticCost slack_cost;
    SlackLimits slack_limits;
    Penalties penalties;

    std::size_t n_bus() const { return buses.size(); }
    std::size_t n_gen() const { return generators.size(); }
    std::size_t n_branch() const { return branches.size(); }
    std::size_t n_bess() const { return bess.size(); }

    std::size_t slack_bus() const;
    /// Lowest-index generator at the slack bus; it absorbs the network imbalance.
    std::size_t slack_generator() const;
    std::size_t bus_index(int id) const;

    double to_pu(double mw) const { return mw / base_mva; }
    double to_mw(double pu) const { return pu * base_mva; }

    bool operator==(const NetworkCase&) const = default;
};

/// Throws CaseSemanticError naming the first violated invariant.
void validate(const NetworkCase& c);

/// Parses either a MATPOWER-style case (bus/gen/branch/gencost) or the canonical JSON
/// document produced by serialize_case. `sidecar` carries storage, attack and penalty
/// metadata for MATPOWER input and must be empty for canonical input.
NetworkCase parse_case(std::string_view text, std::string_view sidecar = {});

NetworkCase load_case_files(const std::string& case_path, const std::string& sidecar_path);

/// Resolves a bundled case name (e.g. "case30") or a path to a .m / .json file.
NetworkCase load_case(const std::string& name_or_path);

std::string serialize_case(const NetworkCase& c);

std::string data_dir();

// ---------------------------------------------------------------------------

struct BranchAdmittance {
    std::complex<double> yff, yft, ytf, ytt;
};

/// Bus admittance matrix with cached polar form and per-branch two-port admittances.
class AdmittanceMatrix {
public:
    explicit AdmittanceMatrix(const NetworkCase& c);

    const Eigen::MatrixXcd& y() const { return y_; }
    const Eigen::MatrixXd& g() const { return g_; }
    const Eigen::MatrixXd& b() const { return b_; }
    const Eigen::MatrixXd& magnitude() const { return mag_; }
    const Eigen::MatrixXd& angle() const { return ang_; }
    const std::vector<BranchAdmittance>& branches() const { return branch_; }
    std::size_t size() const { return static_cast<std::size_t>(y_.rows()); }

private:
    Eigen::MatrixXcd y_;
    Eigen::MatrixXd g_, b_, mag_, ang_;
    std::vector<BranchAdmittance> branch_;
};

inline AdmittanceMatrix build_ybus(const NetworkCase& c) { return AdmittanceMatrix(c); }

// ---------------------------------------------------------------------------

/// Hourly demand scaling, one factor per (hour, bus).
class LoadProfile {
public:
    static constexpr std::size_t kHours = 24;
    static constexpr double kStepHours = 1.0;

    LoadProfile(Eigen::MatrixXd factors);  // hours x buses
    static LoadProfile constant(std::size_t n_bus, double factor = 1.0);

    std::size_t hours() const { return static_cast<std::size_t>(f_.rows()); }
    double factor(std::size_t t, std::size_t bus) const { return f_(t, bus); }
    const Eigen::MatrixXd& factors() const { return f_; }

private:
    Eigen::MatrixXd f_;
};

/// CSV with a header row and an hour column 1..24. Either one factor column (applied to
/// every bus) or one column per bus id.
LoadProfile load_profile(std::string_view csv, const NetworkCase& c);
LoadProfile load_profile_file(const std::string& path, const NetworkCase& c);

/// Per-bus demand at one hour (p.u.).
struct Demand {
    Eigen::VectorXd pd;
    Eigen::VectorXd qd;
};

Demand base_demand(const NetworkCase& c);
Demand demand_at(const NetworkCase& c, const LoadProfile& profile, std::size_t t);

}  // namespace gridguard
