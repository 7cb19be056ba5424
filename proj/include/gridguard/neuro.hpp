#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridguard {

enum class Activation : std::uint8_t { relu = 0, tanh = 1, linear = 2 };

struct DenseLayer {
    Eigen::MatrixXd w;  // out x in
    Eigen::VectorXd b;
    Activation act = Activation::linear;
};

/// Column-major batches: one sample per column.
class Mlp {
public:
    /// Cached activations of one forward pass, input first.
    struct Tape {
        std::vector<Eigen::MatrixXd> a;
    };

    Mlp() = default;
    /// Hidden layers use ReLU; the head uses `head`. Uniform fan-in initialization.
    Mlp(const std::vector<std::size_t>& dims, Activation head, std::uint64_t seed);

    std::size_t input_dim() const;
    std::size_t output_dim() const;
    std::size_t n_params() const;

    Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Tape& tape) const;

    /// Accumulates parameter gradients (flat layout of params()) into `grad` and
    /// returns the gradient with respect to the input batch.
    Eigen::MatrixXd backward(const Tape& tape, const Eigen::MatrixXd& d_out, Eigen::VectorXd& grad) const;

    Eigen::VectorXd params() const;
    void set_params(const Eigen::VectorXd& p);

    std::vector<DenseLayer> layers;
    bool operator==(const Mlp& o) const;
};

struct Adam {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Eigen::VectorXd m, v;
    std::int64_t t = 0;

    void step(Mlp& net, const Eigen::VectorXd& grad);
    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
};

/// target <- (1 - tau) target + tau online
void polyak(Mlp& target, const Mlp& online, double tau);

void write_mlp(std::ostream& os, const Mlp& net);
Mlp read_mlp(std::istream& is);
void write_vector(std::ostream& os, const Eigen::VectorXd& v);
Eigen::VectorXd read_vector(std::istream& is);

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace gridguard
