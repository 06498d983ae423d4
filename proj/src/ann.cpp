#include "sadkit/ann.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sadkit/io.hpp"
#include "sadkit/rng.hpp"

namespace sadkit::ann {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Normalized {
    std::vector<std::vector<double>> x, t;
};

std::vector<double> normalize_row(std::span<const double> row, const std::vector<double>& mean,
                                  const std::vector<double>& scale) {
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = (row[i] - mean[i]) / scale[i];
    return out;
}

// Forward pass on normalized input; hidden activations returned for backprop.
void forward(const MlpModel& m, std::span<const double> xn, std::vector<double>& hidden,
             std::vector<double>& yn) {
    hidden.resize(static_cast<std::size_t>(m.n_hidden));
    yn.resize(static_cast<std::size_t>(m.n_out));
    for (int j = 0; j < m.n_hidden; ++j) {
        double a = m.b1[static_cast<std::size_t>(j)];
        for (int i = 0; i < m.n_in; ++i)
            a += m.w1[static_cast<std::size_t>(j * m.n_in + i)] * xn[static_cast<std::size_t>(i)];
        hidden[static_cast<std::size_t>(j)] = sigmoid(a);
    }
    for (int k = 0; k < m.n_out; ++k) {
        double a = m.b2[static_cast<std::size_t>(k)];
        for (int j = 0; j < m.n_hidden; ++j)
            a += m.w2[static_cast<std::size_t>(k * m.n_hidden + j)] *
                 hidden[static_cast<std::size_t>(j)];
        yn[static_cast<std::size_t>(k)] = a;
    }
}

struct Gradients {
    std::vector<double> w1, b1, w2, b2;
    void zero(const MlpModel& m) {
        w1.assign(m.w1.size(), 0.0);
        b1.assign(m.b1.size(), 0.0);
        w2.assign(m.w2.size(), 0.0);
        b2.assign(m.b2.size(), 0.0);
    }
};

// Accumulates d(0.5*||yn - tn||^2)/dw for one sample; returns the sample's
// squared error.
double backprop_sample(const MlpModel& m, std::span<const double> xn, std::span<const double> tn,
                       Gradients& g, std::vector<double>& hidden, std::vector<double>& yn) {
    forward(m, xn, hidden, yn);
    double se = 0.0;
    std::vector<double> dh(static_cast<std::size_t>(m.n_hidden), 0.0);
    for (int k = 0; k < m.n_out; ++k) {
        const double e = yn[static_cast<std::size_t>(k)] - tn[static_cast<std::size_t>(k)];
        se += e * e;
        g.b2[static_cast<std::size_t>(k)] += e;
        for (int j = 0; j < m.n_hidden; ++j) {
            g.w2[static_cast<std::size_t>(k * m.n_hidden + j)] +=
                e * hidden[static_cast<std::size_t>(j)];
            dh[static_cast<std::size_t>(j)] +=
                e * m.w2[static_cast<std::size_t>(k * m.n_hidden + j)];
        }
    }
    for (int j = 0; j < m.n_hidden; ++j) {
        const double h = hidden[static_cast<std::size_t>(j)];
        const double da = dh[static_cast<std::size_t>(j)] * h * (1.0 - h);
        g.b1[static_cast<std::size_t>(j)] += da;
        for (int i = 0; i < m.n_in; ++i)
            g.w1[static_cast<std::size_t>(j * m.n_in + i)] += da * xn[static_cast<std::size_t>(i)];
    }
    return se;
}

double mse_over(const MlpModel& m, const Normalized& data, const std::vector<std::size_t>& rows) {
    if (rows.empty()) return 0.0;
    std::vector<double> hidden, yn;
    double acc = 0.0;
    for (std::size_t r : rows) {
        forward(m, data.x[r], hidden, yn);
        for (std::size_t k = 0; k < yn.size(); ++k) {
            const double e = yn[k] - data.t[r][k];
            acc += e * e;
        }
    }
    return acc / (static_cast<double>(rows.size()) * static_cast<double>(m.n_out));
}

void init_weights(MlpModel& m, std::uint32_t seed) {
    Rng rng(seed);
    auto fill = [&](std::vector<double>& w, int fan_in, int fan_out) {
        const double r = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& x : w) x = rng.uniform(-r, r);
    };
    m.w1.assign(static_cast<std::size_t>(m.n_hidden * m.n_in), 0.0);
    m.b1.assign(static_cast<std::size_t>(m.n_hidden), 0.0);
    m.w2.assign(static_cast<std::size_t>(m.n_out * m.n_hidden), 0.0);
    m.b2.assign(static_cast<std::size_t>(m.n_out), 0.0);
    fill(m.w1, m.n_in, m.n_hidden);
    fill(m.w2, m.n_hidden, m.n_out);
}

}  // namespace

void Dataset::validate() const {
    if (inputs.empty()) throw InvalidArgument("dataset: empty");
    if (inputs.size() != targets.size()) throw InvalidArgument("dataset: row count mismatch");
    if (!split.empty() && split.size() != inputs.size())
        throw InvalidArgument("dataset: split assignment length mismatch");
    for (std::size_t r = 0; r < inputs.size(); ++r) {
        if (inputs[r].size() != n_inputs() || targets[r].size() != n_targets())
            throw InvalidArgument("dataset: ragged row");
        for (double v : inputs[r])
            if (!std::isfinite(v)) throw InvalidArgument("dataset: non-finite input");
        for (double v : targets[r])
            if (!std::isfinite(v)) throw InvalidArgument("dataset: non-finite target");
    }
}

void Dataset::assign_splits(std::uint32_t seed) {
    const std::size_t n = inputs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    const auto n_train = static_cast<std::size_t>(std::lround(0.70 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::lround(0.15 * static_cast<double>(n)));
    split.assign(n, Split::test);
    for (std::size_t i = 0; i < n; ++i) {
        if (i < n_train)
            split[order[i]] = Split::train;
        else if (i < n_train + n_val)
            split[order[i]] = Split::val;
    }
}

std::array<std::size_t, 3> Dataset::split_counts() const {
    std::array<std::size_t, 3> c{0, 0, 0};
    for (Split s : split) ++c[static_cast<std::size_t>(s)];
    return c;
}

void save_dataset_csv(const Dataset& ds, const std::string& path) {
    ds.validate();
    std::string out = "split";
    for (const auto& n : ds.input_names) out += "," + n;
    for (const auto& n : ds.target_names) out += "," + n;
    out += "\n";
    static const char* kSplitName[] = {"train", "val", "test"};
    for (std::size_t r = 0; r < ds.size(); ++r) {
        out += ds.split.empty() ? "train" : kSplitName[static_cast<std::size_t>(ds.split[r])];
        for (double v : ds.inputs[r]) out += "," + io::g17(v);
        for (double v : ds.targets[r]) out += "," + io::g17(v);
        out += "\n";
    }
    io::atomic_write_text(path, out);
}

Dataset load_dataset_csv(const std::string& path, std::size_t n_inputs) {
    std::istringstream in(io::read_text(path));
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": empty dataset file");
    const auto header = io::split_csv_line(line);
    if (header.size() < 2 + n_inputs || header[0] != "split")
        throw ParseError(path + ": bad dataset header");
    Dataset ds;
    ds.input_names.assign(header.begin() + 1, header.begin() + 1 + static_cast<long>(n_inputs));
    ds.target_names.assign(header.begin() + 1 + static_cast<long>(n_inputs), header.end());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = io::split_csv_line(line);
        if (f.size() != header.size()) throw ParseError(path + ": ragged dataset row");
        Split s;
        if (f[0] == "train")
            s = Split::train;
        else if (f[0] == "val")
            s = Split::val;
        else if (f[0] == "test")
            s = Split::test;
        else
            throw ParseError(path + ": unknown split '" + f[0] + "'");
        std::vector<double> in_row, t_row;
        for (std::size_t i = 0; i < n_inputs; ++i) in_row.push_back(io::parse_double(f[1 + i]));
        for (std::size_t i = 1 + n_inputs; i < f.size(); ++i)
            t_row.push_back(io::parse_double(f[i]));
        ds.inputs.push_back(std::move(in_row));
        ds.targets.push_back(std::move(t_row));
        ds.split.push_back(s);
    }
    ds.validate();
    return ds;
}

TrainResult train(const Dataset& ds, int n_hidden, const TrainOptions& opts, std::uint32_t seed) {
    ds.validate();
    if (n_hidden < 1) throw InvalidArgument("train: need at least one hidden unit");

    Dataset working = ds;
    if (working.split.empty()) working.assign_splits(seed);

    std::vector<std::size_t> train_rows, val_rows, test_rows;
    for (std::size_t r = 0; r < working.size(); ++r) {
        switch (working.split[r]) {
            case Split::train: train_rows.push_back(r); break;
            case Split::val: val_rows.push_back(r); break;
            case Split::test: test_rows.push_back(r); break;
        }
    }
    if (train_rows.empty()) throw InvalidArgument("train: no training rows");
    // Small datasets may have no validation rows; fall back to training rows
    // for the stopping criterion.
    const std::vector<std::size_t>& stop_rows = val_rows.empty() ? train_rows : val_rows;

    MlpModel m;
    m.n_in = static_cast<int>(working.n_inputs());
    m.n_hidden = n_hidden;
    m.n_out = static_cast<int>(working.n_targets());
    m.seed = seed;

    // z-score normalization from the training split; constant features keep
    // unit scale so they normalize to zero.
    m.in_mean.assign(working.n_inputs(), 0.0);
    m.in_scale.assign(working.n_inputs(), 1.0);
    m.out_mean.assign(working.n_targets(), 0.0);
    m.out_scale.assign(working.n_targets(), 1.0);
    m.in_lo.assign(working.n_inputs(), 0.0);
    m.in_hi.assign(working.n_inputs(), 0.0);
    auto moments = [&](auto get, std::size_t dim, std::vector<double>& mean,
                       std::vector<double>& scale) {
        for (std::size_t i = 0; i < dim; ++i) {
            double s = 0.0;
            for (std::size_t r : train_rows) s += get(r)[i];
            mean[i] = s / static_cast<double>(train_rows.size());
            double v = 0.0;
            for (std::size_t r : train_rows) {
                const double d = get(r)[i] - mean[i];
                v += d * d;
            }
            const double sd = std::sqrt(v / static_cast<double>(train_rows.size()));
            scale[i] = sd > 1e-300 ? sd : 1.0;
        }
    };
    moments([&](std::size_t r) -> const std::vector<double>& { return working.inputs[r]; },
            working.n_inputs(), m.in_mean, m.in_scale);
    moments([&](std::size_t r) -> const std::vector<double>& { return working.targets[r]; },
            working.n_targets(), m.out_mean, m.out_scale);
    for (std::size_t i = 0; i < working.n_inputs(); ++i) {
        double lo = working.inputs[train_rows[0]][i], hi = lo;
        for (std::size_t r : train_rows) {
            lo = std::min(lo, working.inputs[r][i]);
            hi = std::max(hi, working.inputs[r][i]);
        }
        m.in_lo[i] = lo;
        m.in_hi[i] = hi;
    }

    Normalized data;
    data.x.reserve(working.size());
    data.t.reserve(working.size());
    for (std::size_t r = 0; r < working.size(); ++r) {
        data.x.push_back(normalize_row(working.inputs[r], m.in_mean, m.in_scale));
        data.t.push_back(normalize_row(working.targets[r], m.out_mean, m.out_scale));
    }

    TrainMetrics metrics;
    double lr0 = opts.learn_rate;

    for (int restart = 0; restart <= opts.max_restarts; ++restart) {
        init_weights(m, seed);
        Gradients g, vel;
        vel.zero(m);
        double lr = lr0;
        double best_val = std::numeric_limits<double>::infinity();
        double best_train = std::numeric_limits<double>::infinity();
        MlpModel best = m;
        int best_epoch = 0;
        int since_val_improve = 0;
        int since_train_improve = 0;
        bool diverged = false;
        int epoch = 0;

        std::vector<double> hidden, yn;
        for (epoch = 1; epoch <= opts.max_epochs; ++epoch) {
            g.zero(m);
            double se = 0.0;
            for (std::size_t r : train_rows) se += backprop_sample(m, data.x[r], data.t[r], g, hidden, yn);
            const double train_mse =
                se / (static_cast<double>(train_rows.size()) * static_cast<double>(m.n_out));
            if (!std::isfinite(train_mse)) {
                diverged = true;
                break;
            }

            const double inv_n = 1.0 / static_cast<double>(train_rows.size());
            auto step = [&](std::vector<double>& w, std::vector<double>& v,
                            const std::vector<double>& grad) {
                for (std::size_t i = 0; i < w.size(); ++i) {
                    v[i] = opts.momentum * v[i] - lr * grad[i] * inv_n;
                    w[i] += v[i];
                }
            };
            step(m.w1, vel.w1, g.w1);
            step(m.b1, vel.b1, g.b1);
            step(m.w2, vel.w2, g.w2);
            step(m.b2, vel.b2, g.b2);

            const double val_mse = mse_over(m, data, stop_rows);
            if (!std::isfinite(val_mse)) {
                diverged = true;
                break;
            }
            if (val_mse < best_val - 1e-15) {
                best_val = val_mse;
                best = m;
                best_epoch = epoch;
                since_val_improve = 0;
            } else if (++since_val_improve >= opts.patience) {
                break;
            }
            if (train_mse < best_train * (1.0 - 1e-9)) {
                best_train = train_mse;
                since_train_improve = 0;
            } else if (++since_train_improve >= opts.plateau) {
                lr = std::max(opts.min_learn_rate, 0.5 * lr);
                since_train_improve = 0;
            }
        }

        if (diverged) {
            if (restart == opts.max_restarts)
                throw TrainingDiverged("train: non-finite loss after all step-size restarts");
            lr0 *= 0.5;
            metrics.restarts = restart + 1;
            continue;
        }

        metrics.val_mse_final = mse_over(m, data, stop_rows);
        m = best;  // early-stop restore
        m.note = "gd-momentum lr0=" + io::g17(lr0) + " momentum=" + io::g17(opts.momentum) +
                 " max_epochs=" + std::to_string(opts.max_epochs) +
                 " patience=" + std::to_string(opts.patience);
        metrics.epochs = std::min(epoch, opts.max_epochs);
        metrics.best_epoch = best_epoch;
        metrics.final_learn_rate = lr;
        metrics.train_mse = mse_over(m, data, train_rows);
        metrics.val_mse = mse_over(m, data, stop_rows);
        metrics.test_mse = test_rows.empty() ? 0.0 : mse_over(m, data, test_rows);

        if (!test_rows.empty()) {
            std::vector<std::vector<double>> preds, truths;
            for (std::size_t r : test_rows) {
                preds.push_back(predict(m, working.inputs[r]).values);
                truths.push_back(working.targets[r]);
            }
            metrics.r2_test = r_squared(preds, truths);
        }
        return {std::move(m), std::move(metrics)};
    }
    throw TrainingDiverged("train: unreachable");
}

Prediction predict(const MlpModel& m, std::span<const double> input) {
    if (static_cast<int>(input.size()) != m.n_in)
        throw InvalidArgument("predict: input length mismatch");
    Prediction p;
    for (int i = 0; i < m.n_in; ++i) {
        const double c = 0.5 * (m.in_hi[static_cast<std::size_t>(i)] +
                                m.in_lo[static_cast<std::size_t>(i)]);
        const double h = 0.5 * (m.in_hi[static_cast<std::size_t>(i)] -
                                m.in_lo[static_cast<std::size_t>(i)]);
        if (std::abs(input[static_cast<std::size_t>(i)] - c) > 1.5 * h &&
            std::abs(input[static_cast<std::size_t>(i)] - c) > 1e-12)
            p.extrapolated = true;
    }
    const std::vector<double> xn = normalize_row(input, m.in_mean, m.in_scale);
    std::vector<double> hidden, yn;
    forward(m, xn, hidden, yn);
    p.values.resize(static_cast<std::size_t>(m.n_out));
    for (int k = 0; k < m.n_out; ++k)
        p.values[static_cast<std::size_t>(k)] =
            yn[static_cast<std::size_t>(k)] * m.out_scale[static_cast<std::size_t>(k)] +
            m.out_mean[static_cast<std::size_t>(k)];
    return p;
}

double gradient_check(const MlpModel& m, std::span<const double> input,
                      std::span<const double> target, double step) {
    const std::vector<double> xn = normalize_row(input, m.in_mean, m.in_scale);
    const std::vector<double> tn = normalize_row(target, m.out_mean, m.out_scale);

    Gradients g;
    g.zero(m);
    std::vector<double> hidden, yn;
    backprop_sample(m, xn, tn, g, hidden, yn);

    MlpModel probe = m;
    auto loss = [&]() {
        forward(probe, xn, hidden, yn);
        double se = 0.0;
        for (std::size_t k = 0; k < yn.size(); ++k) {
            const double e = yn[k] - tn[k];
            se += e * e;
        }
        return 0.5 * se;
    };

    const double h = step;
    double worst = 0.0;
    auto check_block = [&](std::vector<double>& w, const std::vector<double>& grad) {
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double keep = w[i];
            w[i] = keep + h;
            const double lp = loss();
            w[i] = keep - h;
            const double lm = loss();
            w[i] = keep;
            const double fd = (lp - lm) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-10});
            worst = std::max(worst, std::abs(fd - grad[i]) / denom);
        }
    };
    check_block(probe.w1, g.w1);
    check_block(probe.b1, g.b1);
    check_block(probe.w2, g.w2);
    check_block(probe.b2, g.b2);
    return worst;
}

std::vector<double> r_squared(const std::vector<std::vector<double>>& predictions,
                              const std::vector<std::vector<double>>& targets) {
    if (predictions.size() != targets.size() || predictions.size() < 2)
        throw InvalidArgument("r_squared: need >= 2 matching rows");
    const std::size_t m = targets[0].size();
    std::vector<double> out(m);
    for (std::size_t k = 0; k < m; ++k) {
        double mean = 0.0;
        for (const auto& t : targets) mean += t[k];
        mean /= static_cast<double>(targets.size());
        double ss_res = 0.0, ss_tot = 0.0;
        for (std::size_t r = 0; r < targets.size(); ++r) {
            const double e = predictions[r][k] - targets[r][k];
            ss_res += e * e;
            const double d = targets[r][k] - mean;
            ss_tot += d * d;
        }
        if (ss_tot <= 0.0)
            throw InvalidArgument("r_squared: zero target variance in output column");
        out[k] = 1.0 - ss_res / ss_tot;
    }
    return out;
}

namespace {

void write_vec(std::string& out, const char* name, const std::vector<double>& v) {
    out += name;
    for (double x : v) {
        out += ' ';
        out += io::g17(x);
    }
    out += '\n';
}

std::vector<double> read_vec(std::istringstream& in, const std::string& name, std::size_t n) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError("model file: missing block '" + name + "'");
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key != name) throw ParseError("model file: expected '" + name + "', got '" + key + "'");
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) v.push_back(io::parse_double(tok));
    if (v.size() != n)
        throw ParseError("model file: block '" + name + "' has wrong length");
    return v;
}

}  // namespace

void save_model(const MlpModel& m, const std::string& path) {
    std::string out = "sadkit-mlp v1\n";
    out += "seed " + std::to_string(m.seed) + "\n";
    out += "layers " + std::to_string(m.n_in) + " " + std::to_string(m.n_hidden) + " " +
           std::to_string(m.n_out) + "\n";
    out += "note " + (m.note.empty() ? std::string("-") : m.note) + "\n";
    write_vec(out, "in_mean", m.in_mean);
    write_vec(out, "in_scale", m.in_scale);
    write_vec(out, "in_lo", m.in_lo);
    write_vec(out, "in_hi", m.in_hi);
    write_vec(out, "out_mean", m.out_mean);
    write_vec(out, "out_scale", m.out_scale);
    write_vec(out, "w1", m.w1);
    write_vec(out, "b1", m.b1);
    write_vec(out, "w2", m.w2);
    write_vec(out, "b2", m.b2);
    io::atomic_write_text(path, out);
}

MlpModel load_model(const std::string& path) {
    std::istringstream in(io::read_text(path));
    std::string magic, version;
    in >> magic >> version;
    if (magic != "sadkit-mlp") throw ParseError(path + ": not a model file");
    if (version != "v1")
        throw ParseError(path + ": unsupported model format version '" + version + "'");
    std::string key;
    MlpModel m;
    in >> key >> m.seed;
    if (key != "seed") throw ParseError(path + ": expected 'seed'");
    in >> key >> m.n_in >> m.n_hidden >> m.n_out;
    if (key != "layers" || m.n_in < 1 || m.n_hidden < 1 || m.n_out < 1)
        throw ParseError(path + ": bad 'layers' header");
    in.ignore();  // trailing newline
    std::string note_line;
    if (!std::getline(in, note_line) || note_line.rfind("note ", 0) != 0)
        throw ParseError(path + ": missing 'note' line");
    m.note = note_line.substr(5);
    if (m.note == "-") m.note.clear();

    std::istringstream rest(std::string(std::istreambuf_iterator<char>(in), {}));
    const auto nin = static_cast<std::size_t>(m.n_in);
    const auto nh = static_cast<std::size_t>(m.n_hidden);
    const auto nout = static_cast<std::size_t>(m.n_out);
    m.in_mean = read_vec(rest, "in_mean", nin);
    m.in_scale = read_vec(rest, "in_scale", nin);
    m.in_lo = read_vec(rest, "in_lo", nin);
    m.in_hi = read_vec(rest, "in_hi", nin);
    m.out_mean = read_vec(rest, "out_mean", nout);
    m.out_scale = read_vec(rest, "out_scale", nout);
    m.w1 = read_vec(rest, "w1", nh * nin);
    m.b1 = read_vec(rest, "b1", nh);
    m.w2 = read_vec(rest, "w2", nout * nh);
    m.b2 = read_vec(rest, "b2", nout);
    return m;
}

}  // namespace sadkit::ann
