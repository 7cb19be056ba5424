#include "gridguard/neuro.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>

namespace gridguard {

namespace {

Eigen::MatrixXd activate(Activation act, Eigen::MatrixXd z) {
    switch (act) {
        case Activation::relu: return z.cwiseMax(0.0);
        case Activation::tanh: return z.array().tanh().matrix();
        case Activation::linear: return z;
    }
    return z;
}

// d out / d z expressed through the layer output y.
Eigen::MatrixXd activation_grad(Activation act, const Eigen::MatrixXd& y, const Eigen::MatrixXd& d_out) {
    switch (act) {
        case Activation::relu: return (y.array() > 0.0).select(d_out, 0.0);
        case Activation::tanh: return (d_out.array() * (1.0 - y.array().square())).matrix();
        case Activation::linear: return d_out;
    }
    return d_out;
}

constexpr char kMagic[8] = {'G', 'G', 'M', 'L', 'P', '0', '0', '1'};

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError("checkpoint truncated");
    return v;
}

}  // namespace

Mlp::Mlp(const std::vector<std::size_t>& dims, Activation head, std::uint64_t seed) {
    if (dims.size() < 2) throw std::invalid_argument("an MLP needs input and output dimensions");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        DenseLayer layer;
        const auto in = static_cast<Eigen::Index>(dims[l]), out = static_cast<Eigen::Index>(dims[l + 1]);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        layer.w.resize(out, in);
        layer.b.resize(out);
        for (Eigen::Index j = 0; j < in; ++j)
            for (Eigen::Index i = 0; i < out; ++i) layer.w(i, j) = bound * unit(rng);
        for (Eigen::Index i = 0; i < out; ++i) layer.b[i] = bound * unit(rng);
        layer.act = l + 2 == dims.size() ? head : Activation::relu;
        layers.push_back(std::move(layer));
    }
}

std::size_t Mlp::input_dim() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().w.cols()); }
std::size_t Mlp::output_dim() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.back().w.rows()); }

std::size_t Mlp::n_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.w.size() + l.b.size());
    return n;
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
    return forward(Eigen::MatrixXd(x)).col(0);
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
    if (static_cast<std::size_t>(x.rows()) != input_dim())
        throw std::invalid_argument("MLP input has " + std::to_string(x.rows()) + " rows, expected " +
                                    std::to_string(input_dim()));
    Eigen::MatrixXd a = x;
    for (const auto& l : layers) {
        Eigen::MatrixXd z = l.w * a;
        z.colwise() += l.b;
        a = activate(l.act, std::move(z));
    }
    return a;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Tape& tape) const {
    if (static_cast<std::size_t>(x.rows()) != input_dim())
        throw std::invalid_argument("MLP input has " + std::to_string(x.rows()) + " rows, expected " +
                                    std::to_string(input_dim()));
    tape.a.clear();
    tape.a.push_back(x);
    for (const auto& l : layers) {
        Eigen::MatrixXd z = l.w * tape.a.back();
        z.colwise() += l.b;
        tape.a.push_back(activate(l.act, std::move(z)));
    }
    return tape.a.back();
}

Eigen::MatrixXd Mlp::backward(const Tape& tape, const Eigen::MatrixXd& d_out, Eigen::VectorXd& grad) const {
    if (tape.a.size() != layers.size() + 1) throw std::invalid_argument("tape does not match network");
    if (grad.size() == 0) grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_params()));
    if (static_cast<std::size_t>(grad.size()) != n_params()) throw std::invalid_argument("gradient size mismatch");
    if (d_out.rows() != tape.a.back().rows() || d_out.cols() != tape.a.back().cols())
        throw std::invalid_argument("upstream gradient shape mismatch");

    // Offsets of each layer in the flat layout.
    std::vector<Eigen::Index> offset(layers.size());
    Eigen::Index off = 0;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        offset[l] = off;
        off += layers[l].w.size() + layers[l].b.size();
    }
    Eigen::MatrixXd d = d_out;
    for (std::size_t l = layers.size(); l-- > 0;) {
        const auto& layer = layers[l];
        const Eigen::MatrixXd dz = activation_grad(layer.act, tape.a[l + 1], d);
        Eigen::Map<Eigen::MatrixXd> gw(grad.data() + offset[l], layer.w.rows(), layer.w.cols());
        gw.noalias() += dz * tape.a[l].transpose();
        grad.segment(offset[l] + layer.w.size(), layer.b.size()) += dz.rowwise().sum();
        d = layer.w.transpose() * dz;
    }
    return d;
}

Eigen::VectorXd Mlp::params() const {
    Eigen::VectorXd p(static_cast<Eigen::Index>(n_params()));
    Eigen::Index off = 0;
    for (const auto& l : layers) {
        p.segment(off, l.w.size()) = Eigen::Map<const Eigen::VectorXd>(l.w.data(), l.w.size());
        off += l.w.size();
        p.segment(off, l.b.size()) = l.b;
        off += l.b.size();
    }
    return p;
}

void Mlp::set_params(const Eigen::VectorXd& p) {
    if (static_cast<std::size_t>(p.size()) != n_params()) throw std::invalid_argument("parameter size mismatch");
    Eigen::Index off = 0;
    for (auto& l : layers) {
        Eigen::Map<Eigen::VectorXd>(l.w.data(), l.w.size()) = p.segment(off, l.w.size());
        off += l.w.size();
        l.b = p.segment(off, l.b.size());
        off += l.b.size();
    }
}

bool Mlp::operator==(const Mlp& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto &a = layers[l], &b = o.layers[l];
        if (a.act != b.act || a.w.rows() != b.w.rows() || a.w.cols() != b.w.cols() || a.w != b.w || a.b != b.b)
            return false;
    }
    return true;
}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    if (m.size() != params.size()) {
        m = Eigen::VectorXd::Zero(params.size());
        v = Eigen::VectorXd::Zero(params.size());
        t = 0;
    }
    ++t;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

void Adam::step(Mlp& net, const Eigen::VectorXd& grad) {
    Eigen::VectorXd p = net.params();
    step(p, grad);
    net.set_params(p);
}

void polyak(Mlp& target, const Mlp& online, double tau) {
    if (target.layers.size() != online.layers.size()) throw std::invalid_argument("polyak: shape mismatch");
    for (std::size_t l = 0; l < target.layers.size(); ++l) {
        auto& t = target.layers[l];
        const auto& o = online.layers[l];
        t.w = (1.0 - tau) * t.w + tau * o.w;
        t.b = (1.0 - tau) * t.b + tau * o.b;
    }
}

// Raw little-endian doubles keep the round trip bit-exact.
void write_mlp(std::ostream& os, const Mlp& net) {
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(net.layers.size()));
    for (const auto& l : net.layers) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(l.w.rows()));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(l.w.cols()));
        put<std::uint8_t>(os, static_cast<std::uint8_t>(l.act));
        os.write(reinterpret_cast<const char*>(l.w.data()), static_cast<std::streamsize>(sizeof(double) * l.w.size()));
        os.write(reinterpret_cast<const char*>(l.b.data()), static_cast<std::streamsize>(sizeof(double) * l.b.size()));
    }
}

Mlp read_mlp(std::istream& is) {
    char magic[sizeof kMagic];
    if (!is.read(magic, sizeof magic) || !std::equal(magic, magic + sizeof magic, kMagic))
        throw CheckpointError("not a network checkpoint (bad magic)");
    Mlp net;
    const auto n = get<std::uint32_t>(is);
    if (n > 64) throw CheckpointError("implausible layer count");
    for (std::uint32_t k = 0; k < n; ++k) {
        DenseLayer l;
        const auto rows = get<std::uint32_t>(is), cols = get<std::uint32_t>(is);
        const auto act = get<std::uint8_t>(is);
        if (act > 2 || rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16))
            throw CheckpointError("corrupt layer header");
        l.act = static_cast<Activation>(act);
        l.w.resize(rows, cols);
        l.b.resize(rows);
        if (!is.read(reinterpret_cast<char*>(l.w.data()), static_cast<std::streamsize>(sizeof(double) * l.w.size())) ||
            !is.read(reinterpret_cast<char*>(l.b.data()), static_cast<std::streamsize>(sizeof(double) * l.b.size())))
            throw CheckpointError("checkpoint truncated");
        if (!net.layers.empty() && net.layers.back().w.rows() != l.w.cols())
            throw CheckpointError("layer dimensions do not chain");
        net.layers.push_back(std::move(l));
    }
    return net;
}

void write_vector(std::ostream& os, const Eigen::VectorXd& v) {
    put<std::uint64_t>(os, static_cast<std::uint64_t>(v.size()));
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * v.size()));
}

Eigen::VectorXd read_vector(std::istream& is) {
    const auto n = get<std::uint64_t>(is);
    if (n > (1ull << 32)) throw CheckpointError("implausible vector length");
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * n)))
        throw CheckpointError("checkpoint truncated");
    return v;
}

}  // namespace gridguard
