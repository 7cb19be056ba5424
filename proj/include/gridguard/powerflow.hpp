#pragma once

#include "gridguard/case_model.hpp"

#include <Eigen/Dense>

#include <iosfwd>
#include <stdexcept>
#include <vector>

namespace gridguard {

/// Singular Newton Jacobian. `bus()` is the internal index of the bus whose equation lost its pivot.
class PowerFlowError : public std::runtime_error {
public:
    PowerFlowError(std::size_t bus, const std::string& what) : std::runtime_error(what), bus_(bus) {}
    std::size_t bus() const noexcept { return bus_; }

private:
    std::size_t bus_;
};

/// Scheduled net injections. At the slack bus p/q hold only the fixed part
/// (demand, storage, non-slack generators); the slack generator supplies the rest.
/// Buses flagged in `pv` (and the slack bus) hold their magnitude at vm_set.
struct InjectionSpec {
    Eigen::VectorXd p;
    Eigen::VectorXd q;
    std::vector<bool> pv;
    Eigen::VectorXd vm_set;
    std::size_t slack = 0;
    double va_slack = 0.0;

    static InjectionSpec zeros(std::size_t n_bus, std::size_t slack);
};

enum class PfStatus { converged, max_iterations, diverged, singular };

struct OperatingPoint {
    Eigen::VectorXd vm, va;        // p.u., rad
    Eigen::VectorXd p_inj, q_inj;  // computed net injections
    Eigen::VectorXcd s_branch;     // complex from-end flows
    Eigen::VectorXd s_from;        // |S| at from end
    double p_slack = 0.0;          // slack generator output
    double q_slack = 0.0;
    Eigen::VectorXd psi;           // per branch
    Eigen::VectorXd omega;         // per bus
    PfStatus status = PfStatus::diverged;
    bool converged = false;
    int iterations = 0;
    double mismatch = 0.0;         // inf-norm at non-slack equations

    double max_psi() const { return psi.size() ? psi.maxCoeff() : 0.0; }
    double max_omega() const { return omega.size() ? omega.maxCoeff() : 0.0; }
};

struct PfOptions {
    double tol = 1e-8;
    int max_iter = 30;
    // One more Newton step after reaching tol; tightens FD-based callers.
    bool polish = false;
};

OperatingPoint solve_pf(const NetworkCase& c, const AdmittanceMatrix& y, const InjectionSpec& inj,
                        const OperatingPoint* start = nullptr, const PfOptions& opt = {});
OperatingPoint solve_pf(const NetworkCase& c, const InjectionSpec& inj, const OperatingPoint* start = nullptr,
                        const PfOptions& opt = {});

/// As solve_pf but a singular Jacobian is reported through `status` instead of thrown.
OperatingPoint try_solve_pf(const NetworkCase& c, const AdmittanceMatrix& y, const InjectionSpec& inj,
                            const OperatingPoint* start = nullptr, const PfOptions& opt = {}) noexcept;

/// Complex bus injections V .* conj(Y V).
Eigen::VectorXcd bus_injections(const AdmittanceMatrix& y, const Eigen::VectorXd& vm, const Eigen::VectorXd& va);

/// Complex from-end branch flows.
Eigen::VectorXcd branch_flows(const NetworkCase& c, const AdmittanceMatrix& y, const Eigen::VectorXd& vm,
                              const Eigen::VectorXd& va);

struct Violations {
    Eigen::VectorXd psi;
    Eigen::VectorXd omega;
};

Violations violations(const NetworkCase& c, const Eigen::VectorXd& vm, const Eigen::VectorXd& s_from);
inline Violations violations(const NetworkCase& c, const OperatingPoint& op) { return violations(c, op.vm, op.s_from); }

/// Partial derivatives of bus injections with respect to (va, vm), all N x N.
struct PowerDerivatives {
    Eigen::MatrixXd dp_dva, dp_dvm, dq_dva, dq_dvm;
};
PowerDerivatives power_derivatives(const AdmittanceMatrix& y, const Eigen::VectorXd& vm, const Eigen::VectorXd& va);

/// Derivatives of |S_from| with respect to (va, vm), L x N. Rows with zero flow are zero.
struct FlowDerivatives {
    Eigen::MatrixXd ds_dva, ds_dvm;
};
FlowDerivatives flow_derivatives(const NetworkCase& c, const AdmittanceMatrix& y, const Eigen::VectorXd& vm,
                                 const Eigen::VectorXd& va);

/// Direction of a unit change in scheduled injection.
struct InjectionDirection {
    std::size_t bus;
    bool reactive;
};

/// First-order response of a converged operating point to scheduled-injection changes.
/// Columns follow the `dirs` order.
struct Sensitivity {
    Eigen::MatrixXd dvm, dva;  // N x m
    Eigen::RowVectorXd dp_slack, dq_slack;
    Eigen::MatrixXd ds_from;   // L x m
};
Sensitivity sensitivities(const NetworkCase& c, const AdmittanceMatrix& y, const InjectionSpec& inj,
                          const OperatingPoint& op, const std::vector<InjectionDirection>& dirs);

/// Debug dump: bus rows then branch rows.
void write_operating_point_csv(std::ostream& out, const NetworkCase& c, const OperatingPoint& op);

}  // namespace gridguard
