#include "lasq/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lasq/distance.hpp"
#include "lasq/util.hpp"
#include "json.hpp"

namespace lasq {

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "field") return ModelKind::field;
    if (s == "conv") return ModelKind::conv;
    fail(errc::bad_argument, "unknown model kind \"" + s + "\"");
}

const char* to_string(ModelKind k) { return k == ModelKind::field ? "field" : "conv"; }

TrainArm train_arm_from_string(const std::string& s) {
    if (s == "bce") return TrainArm::bce;
    if (s == "se") return TrainArm::se;
    if (s == "sesa") return TrainArm::sesa;
    fail(errc::bad_argument, "unknown training arm \"" + s + "\"");
}

const char* to_string(TrainArm a) {
    switch (a) {
        case TrainArm::bce: return "bce";
        case TrainArm::se: return "se";
        case TrainArm::sesa: return "sesa";
    }
    return "sesa";
}

std::size_t Model::param_count() {
    std::size_t n = 0;
    for (const auto& p : params()) n += p.values->size();
    return n;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------------------
// dense channel-major tensor and the conv/upsample kernels
// ---------------------------------------------------------------------------

struct Tensor {
    int c = 0, nx = 0, ny = 0, nz = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int c_, int nx_, int ny_, int nz_)
        : c(c_), nx(nx_), ny(ny_), nz(nz_), v(static_cast<std::size_t>(c_) * nx_ * ny_ * nz_, 0.0) {}

    std::size_t grid() const { return static_cast<std::size_t>(nx) * ny * nz; }
    double* ch(int ci) { return v.data() + static_cast<std::size_t>(ci) * grid(); }
    const double* ch(int ci) const { return v.data() + static_cast<std::size_t>(ci) * grid(); }
    double* row(int ci, int y, int z) {
        return ch(ci) + (static_cast<std::size_t>(z) * ny + y) * nx;
    }
    const double* row(int ci, int y, int z) const {
        return ch(ci) + (static_cast<std::size_t>(z) * ny + y) * nx;
    }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

// out_row += w[0]*in[x-1] + w[1]*in[x] + w[2]*in[x+1], zero-padded ends
void accum_row3(double* o, const double* in, const double w0, const double w1, const double w2, int nx) {
    if (nx == 1) {
        o[0] += w1 * in[0];
        return;
    }
    o[0] += w1 * in[0] + w2 * in[1];
    for (int x = 1; x < nx - 1; ++x) o[x] += w0 * in[x - 1] + w1 * in[x] + w2 * in[x + 1];
    o[nx - 1] += w0 * in[nx - 2] + w1 * in[nx - 1];
}

struct Conv {
    std::string name;
    int ci = 0, co = 0, k = 3, stride = 1;
    std::vector<double> w, b, gw, gb, mw, mb;

    void configure(std::string n, int ci_, int co_, int k_, int stride_, Rng& rng) {
        name = std::move(n);
        ci = ci_;
        co = co_;
        k = k_;
        stride = stride_;
        const std::size_t nw = static_cast<std::size_t>(co) * ci * k * k * k;
        w.resize(nw);
        b.assign(co, 0.0);
        gw.assign(nw, 0.0);
        gb.assign(co, 0.0);
        mw.assign(nw, 0.0);
        mb.assign(co, 0.0);
        const double bound = std::sqrt(6.0 / (static_cast<double>(ci) * k * k * k));
        for (auto& x : w) x = rng.uniform(-bound, bound);
    }

    std::size_t widx(int oc, int ic, int dz, int dy, int dx) const {
        return (((static_cast<std::size_t>(oc) * ci + ic) * k + dz) * k + dy) * k + dx;
    }
};

// z-outer loop order keeps the three input planes a z-slab needs resident in
// cache while every output channel consumes them
void conv3s1_forward(const Conv& cv, const Tensor& in, Tensor& out, unsigned jobs) {
    parallel_for(static_cast<std::size_t>(out.nz), jobs, [&](std::size_t zlo, std::size_t zhi) {
        for (std::size_t zs = zlo; zs < zhi; ++zs) {
            const int z = static_cast<int>(zs);
            for (int oc = 0; oc < cv.co; ++oc)
                for (int y = 0; y < out.ny; ++y) {
                    double* orow = out.row(oc, y, z);
                    const double bias = cv.b[oc];
                    for (int x = 0; x < out.nx; ++x) orow[x] = bias;
                    for (int ic = 0; ic < cv.ci; ++ic)
                        for (int dz = 0; dz < 3; ++dz) {
                            const int zz = z + dz - 1;
                            if (zz < 0 || zz >= in.nz) continue;
                            for (int dy = 0; dy < 3; ++dy) {
                                const int yy = y + dy - 1;
                                if (yy < 0 || yy >= in.ny) continue;
                                const double* irow = in.row(ic, yy, zz);
                                const std::size_t base = cv.widx(oc, ic, dz, dy, 0);
                                accum_row3(orow, irow, cv.w[base], cv.w[base + 1], cv.w[base + 2], out.nx);
                            }
                        }
                }
        }
    });
}

// gradient w.r.t. the input: correlation with the flipped kernel
void conv3s1_backward_data(const Conv& cv, const Tensor& gout, Tensor& gin, bool accumulate, unsigned jobs) {
    parallel_for(static_cast<std::size_t>(gin.nz), jobs, [&](std::size_t zlo, std::size_t zhi) {
        for (std::size_t zs = zlo; zs < zhi; ++zs) {
            const int z = static_cast<int>(zs);
            for (int ic = 0; ic < cv.ci; ++ic)
                for (int y = 0; y < gin.ny; ++y) {
                    double* grow = gin.row(ic, y, z);
                    if (!accumulate)
                        for (int x = 0; x < gin.nx; ++x) grow[x] = 0.0;
                    for (int oc = 0; oc < cv.co; ++oc)
                        for (int ez = -1; ez <= 1; ++ez) {
                            const int zz = z + ez;
                            if (zz < 0 || zz >= gout.nz) continue;
                            for (int ey = -1; ey <= 1; ++ey) {
                                const int yy = y + ey;
                                if (yy < 0 || yy >= gout.ny) continue;
                                const double* orow = gout.row(oc, yy, zz);
                                const std::size_t base = cv.widx(oc, ic, 1 - ez, 1 - ey, 0);
                                // x-taps flip as well
                                accum_row3(grow, orow, cv.w[base + 2], cv.w[base + 1], cv.w[base], gin.nx);
                            }
                        }
                }
        }
    });
}

// filter gradients accumulate into a fixed number of z-chunk partials that are
// reduced in chunk order, so results do not depend on the worker count
void conv3s1_backward_filter(Conv& cv, const Tensor& in, const Tensor& gout, unsigned jobs) {
    constexpr int kChunks = 8;
    const int nz = gout.nz;
    const int chunk_len = (nz + kChunks - 1) / kChunks;
    const std::size_t nw = cv.w.size();
    std::vector<std::vector<double>> gw_part(kChunks);
    std::vector<std::vector<double>> gb_part(kChunks);

    parallel_for(kChunks, jobs, [&](std::size_t clo, std::size_t chi) {
        for (std::size_t ci = clo; ci < chi; ++ci) {
            const int z0 = static_cast<int>(ci) * chunk_len;
            const int z1 = std::min(nz, z0 + chunk_len);
            if (z0 >= z1) continue;
            auto& gw = gw_part[ci];
            auto& gb = gb_part[ci];
            gw.assign(nw, 0.0);
            gb.assign(cv.co, 0.0);
            for (int z = z0; z < z1; ++z)
                for (int oc = 0; oc < cv.co; ++oc) {
                    for (int y = 0; y < gout.ny; ++y) {
                        const double* orow = gout.row(oc, y, z);
                        double bs = 0.0;
                        for (int x = 0; x < gout.nx; ++x) bs += orow[x];
                        gb[oc] += bs;
                    }
                    for (int ic = 0; ic < cv.ci; ++ic)
                        for (int dz = 0; dz < 3; ++dz) {
                            const int zz = z + dz - 1;
                            if (zz < 0 || zz >= in.nz) continue;
                            for (int dy = 0; dy < 3; ++dy) {
                                double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                                for (int y = 0; y < gout.ny; ++y) {
                                    const int yy = y + dy - 1;
                                    if (yy < 0 || yy >= in.ny) continue;
                                    const double* irow = in.row(ic, yy, zz);
                                    const double* orow = gout.row(oc, y, z);
                                    const int nx = gout.nx;
                                    a1 += irow[0] * orow[0];
                                    if (nx > 1) a2 += irow[1] * orow[0];
                                    for (int x = 1; x < nx - 1; ++x) {
                                        const double g = orow[x];
                                        a0 += irow[x - 1] * g;
                                        a1 += irow[x] * g;
                                        a2 += irow[x + 1] * g;
                                    }
                                    if (nx > 1) {
                                        const double g = orow[nx - 1];
                                        a0 += irow[nx - 2] * g;
                                        a1 += irow[nx - 1] * g;
                                    }
                                }
                                const std::size_t base = cv.widx(oc, ic, dz, dy, 0);
                                gw[base] += a0;
                                gw[base + 1] += a1;
                                gw[base + 2] += a2;
                            }
                        }
                }
        }
    });

    for (int c = 0; c < kChunks; ++c) {
        if (gw_part[c].empty()) continue;
        for (std::size_t i = 0; i < nw; ++i) cv.gw[i] += gw_part[c][i];
        for (int oc = 0; oc < cv.co; ++oc) cv.gb[oc] += gb_part[c][oc];
    }
}

void conv3s2_forward(const Conv& cv, const Tensor& in, Tensor& out, unsigned jobs) {
    parallel_for(static_cast<std::size_t>(cv.co), jobs, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t oc = lo; oc < hi; ++oc)
            for (int z = 0; z < out.nz; ++z)
                for (int y = 0; y < out.ny; ++y)
                    for (int x = 0; x < out.nx; ++x) {
                        double acc = cv.b[oc];
                        for (int ic = 0; ic < cv.ci; ++ic)
                            for (int dz = 0; dz < 3; ++dz) {
                                const int zz = 2 * z + dz - 1;
                                if (zz < 0 || zz >= in.nz) continue;
                                for (int dy = 0; dy < 3; ++dy) {
                                    const int yy = 2 * y + dy - 1;
                                    if (yy < 0 || yy >= in.ny) continue;
                                    const double* irow = in.row(ic, yy, zz);
                                    for (int dx = 0; dx < 3; ++dx) {
                                        const int xx = 2 * x + dx - 1;
                                        if (xx < 0 || xx >= in.nx) continue;
                                        acc += cv.w[cv.widx(static_cast<int>(oc), ic, dz, dy, dx)] * irow[xx];
                                    }
                                }
                            }
                        out.row(static_cast<int>(oc), y, z)[x] = acc;
                    }
    });
}

void conv3s2_backward_data(const Conv& cv, const Tensor& gout, Tensor& gin, unsigned jobs) {
    parallel_for(static_cast<std::size_t>(cv.ci), jobs, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t ic = lo; ic < hi; ++ic)
            for (int zi = 0; zi < gin.nz; ++zi)
                for (int yi = 0; yi < gin.ny; ++yi)
                    for (int xi = 0; xi < gin.nx; ++xi) {
                        double acc = 0.0;
                        for (int oc = 0; oc < cv.co; ++oc)
                            for (int dz = 0; dz < 3; ++dz) {
                                const int num_z = zi + 1 - dz;
                                if (num_z < 0 || num_z % 2) continue;
                                const int zo = num_z / 2;
                                if (zo >= gout.nz) continue;
                                for (int dy = 0; dy < 3; ++dy) {
                                    const int num_y = yi + 1 - dy;
                                    if (num_y < 0 || num_y % 2) continue;
                                    const int yo = num_y / 2;
                                    if (yo >= gout.ny) continue;
                                    for (int dx = 0; dx < 3; ++dx) {
                                        const int num_x = xi + 1 - dx;
                                        if (num_x < 0 || num_x % 2) continue;
                                        const int xo = num_x / 2;
                                        if (xo >= gout.nx) continue;
                                        acc += cv.w[cv.widx(oc, static_cast<int>(ic), dz, dy, dx)] *
                                               gout.row(oc, yo, zo)[xo];
                                    }
                                }
                            }
                        gin.row(static_cast<int>(ic), yi, zi)[xi] = acc;
                    }
    });
}

void conv3s2_backward_filter(Conv& cv, const Tensor& in, const Tensor& gout, unsigned jobs) {
    parallel_for(static_cast<std::size_t>(cv.co), jobs, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t oc = lo; oc < hi; ++oc) {
            double bsum = 0.0;
            const double* gch = gout.ch(static_cast<int>(oc));
            for (std::size_t i = 0; i < gout.grid(); ++i) bsum += gch[i];
            cv.gb[oc] += bsum;
            for (int ic = 0; ic < cv.ci; ++ic)
                for (int dz = 0; dz < 3; ++dz)
                    for (int dy = 0; dy < 3; ++dy)
                        for (int dx = 0; dx < 3; ++dx) {
                            double acc = 0.0;
                            for (int z = 0; z < gout.nz; ++z) {
                                const int zz = 2 * z + dz - 1;
                                if (zz < 0 || zz >= in.nz) continue;
                                for (int y = 0; y < gout.ny; ++y) {
                                    const int yy = 2 * y + dy - 1;
                                    if (yy < 0 || yy >= in.ny) continue;
                                    const double* irow = in.row(ic, yy, zz);
                                    const double* orow = gout.row(static_cast<int>(oc), y, z);
                                    for (int x = 0; x < gout.nx; ++x) {
                                        const int xx = 2 * x + dx - 1;
                                        if (xx < 0 || xx >= in.nx) continue;
                                        acc += irow[xx] * orow[x];
                                    }
                                }
                            }
                            cv.gw[cv.widx(static_cast<int>(oc), ic, dz, dy, dx)] += acc;
                        }
        }
    });
}

void conv1x1_forward(const Conv& cv, const Tensor& in, Tensor& out, unsigned jobs) {
    parallel_for(static_cast<std::size_t>(cv.co), jobs, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t oc = lo; oc < hi; ++oc) {
            double* och = out.ch(static_cast<int>(oc));
            const double bias = cv.b[oc];
            for (std::size_t i = 0; i < out.grid(); ++i) och[i] = bias;
            for (int ic = 0; ic < cv.ci; ++ic) {
                const double wv = cv.w[static_cast<std::size_t>(oc) * cv.ci + ic];
                const double* ich = in.ch(ic);
                for (std::size_t i = 0; i < out.grid(); ++i) och[i] += wv * ich[i];
            }
        }
    });
}

void conv1x1_backward(Conv& cv, const Tensor& in, const Tensor& gout, Tensor& gin, bool want_gin, unsigned jobs) {
    if (want_gin) {
        parallel_for(static_cast<std::size_t>(cv.ci), jobs, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t ic = lo; ic < hi; ++ic) {
                double* gch = gin.ch(static_cast<int>(ic));
                for (std::size_t i = 0; i < gin.grid(); ++i) gch[i] = 0.0;
                for (int oc = 0; oc < cv.co; ++oc) {
                    const double wv = cv.w[static_cast<std::size_t>(oc) * cv.ci + ic];
                    const double* och = gout.ch(oc);
                    for (std::size_t i = 0; i < gin.grid(); ++i) gch[i] += wv * och[i];
                }
            }
        });
    }
    for (int oc = 0; oc < cv.co; ++oc) {
        const double* och = gout.ch(oc);
        double bsum = 0.0;
        for (std::size_t i = 0; i < gout.grid(); ++i) bsum += och[i];
        cv.gb[oc] += bsum;
        for (int ic = 0; ic < cv.ci; ++ic) {
            const double* ich = in.ch(ic);
            double acc = 0.0;
            for (std::size_t i = 0; i < gout.grid(); ++i) acc += ich[i] * och[i];
            cv.gw[static_cast<std::size_t>(oc) * cv.ci + ic] += acc;
        }
    }
}

// exponential-linear activation; smooth enough that finite differences of
// the composite objective converge everywhere
void elu_inplace(Tensor& t) {
    for (auto& x : t.v)
        if (x <= 0.0) x = std::expm1(x);
}

// for x <= 0 the derivative equals post + 1 (post = e^x - 1)
void elu_backward_inplace(const Tensor& post, Tensor& grad) {
    for (std::size_t i = 0; i < post.v.size(); ++i)
        if (post.v[i] <= 0.0) grad.v[i] *= post.v[i] + 1.0;
}

void upsample2_forward(const Tensor& in, Tensor& out) {
    for (int ic = 0; ic < in.c; ++ic)
        for (int z = 0; z < out.nz; ++z)
            for (int y = 0; y < out.ny; ++y) {
                const double* irow = in.row(ic, y / 2, z / 2);
                double* orow = out.row(ic, y, z);
                for (int x = 0; x < out.nx; ++x) orow[x] = irow[x / 2];
            }
}

void upsample2_backward(const Tensor& gout, Tensor& gin) {
    gin.zero();
    for (int ic = 0; ic < gout.c; ++ic)
        for (int z = 0; z < gout.nz; ++z)
            for (int y = 0; y < gout.ny; ++y) {
                const double* orow = gout.row(ic, y, z);
                double* irow = gin.row(ic, y / 2, z / 2);
                for (int x = 0; x < gout.nx; ++x) irow[x / 2] += orow[x];
            }
}

void concat(const Tensor& a, const Tensor& b, Tensor& out) {
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
}

void split(const Tensor& g, Tensor& ga, Tensor& gb) {
    std::copy(g.v.begin(), g.v.begin() + static_cast<std::ptrdiff_t>(ga.v.size()), ga.v.begin());
    std::copy(g.v.begin() + static_cast<std::ptrdiff_t>(ga.v.size()), g.v.end(), gb.v.begin());
}

// ---------------------------------------------------------------------------
// field model: free per-voxel logits
// ---------------------------------------------------------------------------

class FieldModel final : public Model {
public:
    FieldModel(Dims dims, Spacing spacing, std::uint64_t seed) : dims_(dims), spacing_(spacing) {
        const std::size_t n = dims.count();
        Rng rng(seed);
        auto init = [&](std::vector<double>& v) {
            v.resize(n);
            for (auto& x : v) x = rng.uniform(-0.01, 0.01);
        };
        init(logit_la_);
        init(logit_pn_);
        init(logit_ps_);
        g_la_.assign(n, 0.0);
        g_pn_.assign(n, 0.0);
        g_ps_.assign(n, 0.0);
        m_la_.assign(n, 0.0);
        m_pn_.assign(n, 0.0);
        m_ps_.assign(n, 0.0);
    }

    ModelKind kind() const override { return ModelKind::field; }
    Dims dims() const override { return dims_; }

    ModelOutputs forward(const Volume3& intensity) override {
        if (!(intensity.dims() == dims_))
            fail(errc::grid_mismatch, "intensity grid does not match the model configuration");
        ModelOutputs out;
        out.pred_la = Volume3(dims_, spacing_);
        out.dpm_pred.p_normal = Volume3(dims_, spacing_);
        out.dpm_pred.p_scar = Volume3(dims_, spacing_);
        for (std::size_t i = 0; i < dims_.count(); ++i) {
            out.pred_la[i] = sigmoid(logit_la_[i]);
            out.dpm_pred.p_normal[i] = sigmoid(logit_pn_[i]);
            out.dpm_pred.p_scar[i] = sigmoid(logit_ps_[i]);
        }
        last_ = out;
        has_forward_ = true;
        return out;
    }

    void backward(const Volume3& grad_la, const Volume3& grad_pn, const Volume3& grad_ps) override {
        if (!has_forward_) fail(errc::bad_argument, "backward without a preceding forward");
        for (std::size_t i = 0; i < dims_.count(); ++i) {
            const double ol = last_.pred_la[i], on = last_.dpm_pred.p_normal[i], os = last_.dpm_pred.p_scar[i];
            g_la_[i] += grad_la[i] * ol * (1.0 - ol);
            g_pn_[i] += grad_pn[i] * on * (1.0 - on);
            g_ps_[i] += grad_ps[i] * os * (1.0 - os);
        }
    }

    void zero_grad() override {
        std::fill(g_la_.begin(), g_la_.end(), 0.0);
        std::fill(g_pn_.begin(), g_pn_.end(), 0.0);
        std::fill(g_ps_.begin(), g_ps_.end(), 0.0);
    }

    std::vector<ParamBlock> params() override {
        return {{"logit_la", &logit_la_, &g_la_, &m_la_},
                {"logit_p_normal", &logit_pn_, &g_pn_, &m_pn_},
                {"logit_p_scar", &logit_ps_, &g_ps_, &m_ps_}};
    }

private:
    Dims dims_;
    Spacing spacing_;
    std::vector<double> logit_la_, logit_pn_, logit_ps_;
    std::vector<double> g_la_, g_pn_, g_ps_;
    std::vector<double> m_la_, m_pn_, m_ps_;
    ModelOutputs last_;
    bool has_forward_ = false;
};

// ---------------------------------------------------------------------------
// conv model
// ---------------------------------------------------------------------------

class ConvModel final : public Model {
public:
    ConvModel(Dims dims, Spacing spacing, std::uint64_t seed, unsigned jobs)
        : dims_(dims), spacing_(spacing), jobs_(jobs) {
        if (dims.nx % 4 || dims.ny % 4 || dims.nz % 4)
            fail(errc::bad_argument, "conv model needs dims divisible by 4");
        Rng rng(seed);
        enc1_.configure("enc1", 1, 8, 3, 1, rng);
        enc2_.configure("enc2", 8, 16, 3, 2, rng);
        enc3_.configure("enc3", 16, 32, 3, 2, rng);
        for (int h = 0; h < 2; ++h) {
            const std::string hn = h == 0 ? "la" : "scar";
            heads_[h].reduce.configure(hn + ".reduce", 32, 8, 1, 1, rng);
            heads_[h].dec2.configure(hn + ".dec2", 24, 8, 3, 1, rng);
            heads_[h].dec1.configure(hn + ".dec1", 9, 8, 3, 1, rng);
            heads_[h].out.configure(hn + ".out", 8, h == 0 ? 1 : 2, 1, 1, rng);
            // start the probability heads at the sparse-target equilibrium so
            // momentum does not crash the logits into the saturated tail
            if (h == 1)
                for (auto& b : heads_[h].out.b) b = -3.3;
        }
    }

    ModelKind kind() const override { return ModelKind::conv; }
    Dims dims() const override { return dims_; }

    ModelOutputs forward(const Volume3& intensity) override {
        if (!(intensity.dims() == dims_))
            fail(errc::grid_mismatch, "intensity grid does not match the model configuration");
        const int nx = dims_.nx, ny = dims_.ny, nz = dims_.nz;
        const int hx = nx / 2, hy = ny / 2, hz = nz / 2;
        const int qx = nx / 4, qy = ny / 4, qz = nz / 4;

        // z-score the input, as in the acquisition preprocessing
        x_ = Tensor(1, nx, ny, nz);
        {
            const std::size_t n = intensity.size();
            const double mean = pairwise_sum(intensity.data()) / static_cast<double>(n);
            std::vector<double> sq(n);
            for (std::size_t i = 0; i < n; ++i) sq[i] = (intensity[i] - mean) * (intensity[i] - mean);
            double sd = std::sqrt(pairwise_sum(sq) / static_cast<double>(n));
            if (sd < 1e-12) sd = 1.0;
            for (std::size_t i = 0; i < n; ++i) x_.v[i] = (intensity[i] - mean) / sd;
        }

        f1_ = Tensor(8, nx, ny, nz);
        conv3s1_forward(enc1_, x_, f1_, jobs_);
        elu_inplace(f1_);
        f2_ = Tensor(16, hx, hy, hz);
        conv3s2_forward(enc2_, f1_, f2_, jobs_);
        elu_inplace(f2_);
        f3_ = Tensor(32, qx, qy, qz);
        conv3s2_forward(enc3_, f2_, f3_, jobs_);
        elu_inplace(f3_);

        for (int h = 0; h < 2; ++h) {
            Head& hd = heads_[h];
            hd.r = Tensor(8, qx, qy, qz);
            conv1x1_forward(hd.reduce, f3_, hd.r, jobs_);
            elu_inplace(hd.r);
            hd.u2 = Tensor(8, hx, hy, hz);
            upsample2_forward(hd.r, hd.u2);
            hd.c2 = Tensor(24, hx, hy, hz);
            concat(hd.u2, f2_, hd.c2);
            hd.d2 = Tensor(8, hx, hy, hz);
            conv3s1_forward(hd.dec2, hd.c2, hd.d2, jobs_);
            elu_inplace(hd.d2);
            hd.u1 = Tensor(8, nx, ny, nz);
            upsample2_forward(hd.d2, hd.u1);
            hd.c1 = Tensor(9, nx, ny, nz);
            concat(hd.u1, x_, hd.c1);
            hd.d1 = Tensor(8, nx, ny, nz);
            conv3s1_forward(hd.dec1, hd.c1, hd.d1, jobs_);
            elu_inplace(hd.d1);
            hd.o = Tensor(hd.out.co, nx, ny, nz);
            conv1x1_forward(hd.out, hd.d1, hd.o, jobs_);
            for (auto& v : hd.o.v) v = sigmoid(v);
        }

        ModelOutputs out;
        out.pred_la = Volume3(dims_, spacing_, std::vector<double>(heads_[0].o.v));
        out.dpm_pred.p_normal = Volume3(dims_, spacing_,
                                        std::vector<double>(heads_[1].o.ch(0), heads_[1].o.ch(0) + dims_.count()));
        out.dpm_pred.p_scar = Volume3(dims_, spacing_,
                                      std::vector<double>(heads_[1].o.ch(1), heads_[1].o.ch(1) + dims_.count()));
        has_forward_ = true;
        return out;
    }

    void backward(const Volume3& grad_la, const Volume3& grad_pn, const Volume3& grad_ps) override {
        if (!has_forward_) fail(errc::bad_argument, "backward without a preceding forward");
        const int nx = dims_.nx, ny = dims_.ny, nz = dims_.nz;
        const int hx = nx / 2, hy = ny / 2, hz = nz / 2;
        const int qx = nx / 4, qy = ny / 4, qz = nz / 4;
        const std::size_t n = dims_.count();

        Tensor gf1(8, nx, ny, nz), gf2(16, hx, hy, hz), gf3(32, qx, qy, qz);
        gf1.zero();
        gf2.zero();
        gf3.zero();

        for (int h = 0; h < 2; ++h) {
            Head& hd = heads_[h];
            Tensor go(hd.out.co, nx, ny, nz);
            for (int c = 0; c < hd.out.co; ++c) {
                const Volume3& src = h == 0 ? grad_la : (c == 0 ? grad_pn : grad_ps);
                const double* ov = hd.o.ch(c);
                double* gv = go.ch(c);
                for (std::size_t i = 0; i < n; ++i) gv[i] = src[i] * ov[i] * (1.0 - ov[i]);
            }

            Tensor gd1(8, nx, ny, nz);
            conv1x1_backward(hd.out, hd.d1, go, gd1, true, jobs_);
            elu_backward_inplace(hd.d1, gd1);

            Tensor gc1(9, nx, ny, nz);
            conv3s1_backward_filter(hd.dec1, hd.c1, gd1, jobs_);
            conv3s1_backward_data(hd.dec1, gd1, gc1, false, jobs_);
            Tensor gu1(8, nx, ny, nz);
            std::copy(gc1.v.begin(), gc1.v.begin() + static_cast<std::ptrdiff_t>(gu1.v.size()), gu1.v.begin());

            Tensor gd2(8, hx, hy, hz);
            upsample2_backward(gu1, gd2);
            elu_backward_inplace(hd.d2, gd2);

            Tensor gc2(24, hx, hy, hz);
            conv3s1_backward_filter(hd.dec2, hd.c2, gd2, jobs_);
            conv3s1_backward_data(hd.dec2, gd2, gc2, false, jobs_);
            Tensor gu2(8, hx, hy, hz), gf2h(16, hx, hy, hz);
            split(gc2, gu2, gf2h);
            for (std::size_t i = 0; i < gf2.v.size(); ++i) gf2.v[i] += gf2h.v[i];

            Tensor gr(8, qx, qy, qz);
            upsample2_backward(gu2, gr);
            elu_backward_inplace(hd.r, gr);
            Tensor gf3h(32, qx, qy, qz);
            conv1x1_backward(hd.reduce, f3_, gr, gf3h, true, jobs_);
            for (std::size_t i = 0; i < gf3.v.size(); ++i) gf3.v[i] += gf3h.v[i];
        }

        elu_backward_inplace(f3_, gf3);
        conv3s2_backward_filter(enc3_, f2_, gf3, jobs_);
        Tensor gf2e(16, hx, hy, hz);
        conv3s2_backward_data(enc3_, gf3, gf2e, jobs_);
        for (std::size_t i = 0; i < gf2.v.size(); ++i) gf2.v[i] += gf2e.v[i];

        elu_backward_inplace(f2_, gf2);
        conv3s2_backward_filter(enc2_, f1_, gf2, jobs_);
        Tensor gf1e(8, nx, ny, nz);
        conv3s2_backward_data(enc2_, gf2, gf1e, jobs_);
        for (std::size_t i = 0; i < gf1.v.size(); ++i) gf1.v[i] += gf1e.v[i];

        elu_backward_inplace(f1_, gf1);
        conv3s1_backward_filter(enc1_, x_, gf1, jobs_);
        // the gradient w.r.t. the raw intensity is not needed
    }

    void zero_grad() override {
        for (Conv* c : convs()) {
            std::fill(c->gw.begin(), c->gw.end(), 0.0);
            std::fill(c->gb.begin(), c->gb.end(), 0.0);
        }
    }

    std::vector<ParamBlock> params() override {
        std::vector<ParamBlock> out;
        for (Conv* c : convs()) {
            out.push_back({c->name + ".w", &c->w, &c->gw, &c->mw});
            out.push_back({c->name + ".b", &c->b, &c->gb, &c->mb});
        }
        return out;
    }

private:
    struct Head {
        Conv reduce, dec2, dec1, out;
        Tensor r, u2, c2, d2, u1, c1, d1, o;
    };

    std::vector<Conv*> convs() {
        return {&enc1_, &enc2_, &enc3_,
                &heads_[0].reduce, &heads_[0].dec2, &heads_[0].dec1, &heads_[0].out,
                &heads_[1].reduce, &heads_[1].dec2, &heads_[1].dec1, &heads_[1].out};
    }

    Dims dims_;
    Spacing spacing_;
    unsigned jobs_;
    Conv enc1_, enc2_, enc3_;
    Head heads_[2];
    Tensor x_, f1_, f2_, f3_;
    bool has_forward_ = false;
};

} // namespace

std::unique_ptr<Model> make_model(ModelKind kind, Dims dims, Spacing spacing, std::uint64_t seed,
                                  unsigned jobs) {
    if (kind == ModelKind::field) return std::make_unique<FieldModel>(dims, spacing, seed);
    return std::make_unique<ConvModel>(dims, spacing, seed, jobs);
}

void save_checkpoint(const std::string& dir, Model& model, Spacing spacing) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["kind"] = to_string(model.kind());
    j["dims"] = {model.dims().nx, model.dims().ny, model.dims().nz};
    j["spacing"] = {spacing.sx, spacing.sy, spacing.sz};
    j["params"] = nlohmann::json::array();
    for (const auto& p : model.params()) {
        const std::string file = p.name + ".mvol";
        j["params"].push_back({{"name", p.name}, {"size", p.values->size()}, {"file", file}});
        Volume3 flat({static_cast<int>(p.values->size()), 1, 1}, {1, 1, 1}, *p.values);
        VolumeHeader h;
        h.dims = flat.dims();
        h.spacing = flat.spacing();
        h.kind = ValueKind::intensity;
        h.checksum = payload_checksum(flat);
        write_mvol(dir + "/" + file, h, flat);
    }
    std::ofstream out(dir + "/manifest.json", std::ios::binary | std::ios::trunc);
    if (!out) fail(errc::io, "cannot write checkpoint manifest under " + dir);
    out << j.dump(2) << '\n';
}

std::unique_ptr<Model> load_checkpoint(const std::string& dir, unsigned jobs) {
    std::ifstream in(dir + "/manifest.json", std::ios::binary);
    if (!in) fail(errc::io, "cannot open " + dir + "/manifest.json");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) fail(errc::malformed_header, dir + ": checkpoint manifest is not valid JSON");

    const ModelKind kind = model_kind_from_string(j.at("kind").get<std::string>());
    const Dims dims{j.at("dims")[0].get<int>(), j.at("dims")[1].get<int>(), j.at("dims")[2].get<int>()};
    const Spacing sp{j.at("spacing")[0].get<double>(), j.at("spacing")[1].get<double>(), j.at("spacing")[2].get<double>()};
    auto model = make_model(kind, dims, sp, 0, jobs);
    auto blocks = model->params();
    for (const auto& e : j.at("params")) {
        const std::string name = e.at("name").get<std::string>();
        auto it = std::find_if(blocks.begin(), blocks.end(), [&](const ParamBlock& b) { return b.name == name; });
        if (it == blocks.end()) fail(errc::malformed_header, dir + ": unknown parameter block " + name);
        const Volume3 flat = read_mvol_volume(dir + "/" + e.at("file").get<std::string>());
        if (flat.size() != it->values->size())
            fail(errc::payload_length, dir + ": parameter block " + name + " has wrong size");
        std::copy(flat.data().begin(), flat.data().end(), it->values->begin());
    }
    return model;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (iterations < 0) fail(errc::bad_argument, "iterations must be nonnegative");
    if (!(lr0 > 0)) fail(errc::bad_argument, "learning rate must be positive");
    if (lr_step <= 0) fail(errc::bad_argument, "lr step must be positive");
    if (momentum < 0 || momentum >= 1) fail(errc::bad_argument, "momentum must be in [0,1)");
    if (weight_decay < 0) fail(errc::bad_argument, "weight decay must be nonnegative");
    if (!(beta > 0) || !(clip > 0)) fail(errc::bad_argument, "beta and clip must be positive");
    weights.validate();
}

std::string train_log_csv_header() {
    return "iter,lr,lambda_la,lambda_scar,lambda_m1,lambda_m2,bce_la,se_la,se_scar,scar_bce,sa_m1,sa_m2,total,grad_norm";
}

std::string train_log_csv_row(const TrainLogRow& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                  r.iter, r.lr, r.lambda_la, r.lambda_scar, r.lambda_m1, r.lambda_m2, r.bce_la, r.se_la,
                  r.se_scar, r.scar_bce, r.sa_m1, r.sa_m2, r.total, r.grad_norm);
    return buf;
}

namespace {

struct CaseTargets {
    PhantomCase data;
    SignedDistanceMap la_dtm;
    DistanceProbabilityMap dpm_target;
    SurfaceMask m1;
    LabelVolume wall_indicator; // {0,1}, 1 on normal wall
    LabelVolume scar_indicator; // {0,1}, 1 on scar
};

CaseTargets prepare_case(PhantomCase c, const TrainConfig& cfg) {
    CaseTargets t{std::move(c), {}, {}, {}, {}, {}};
    t.la_dtm = signed_edt(t.data.la_label, cfg.beta, cfg.clip, false, cfg.jobs);
    t.dpm_target = build_dpm_from_label(t.data.wall_scar_label, cfg.variant, cfg.beta, cfg.clip, false, cfg.jobs);
    t.m1 = hard_boundary_mask(t.data.la_label);
    const Volume3& ws = t.data.wall_scar_label.vol();
    Volume3 wall(ws.dims(), ws.spacing()), scar(ws.dims(), ws.spacing());
    for (std::size_t i = 0; i < ws.size(); ++i) {
        wall[i] = t.data.wall_scar_label.label_at(i) == 1 ? 1.0 : 0.0;
        scar[i] = t.data.wall_scar_label.label_at(i) == 2 ? 1.0 : 0.0;
    }
    t.wall_indicator = LabelVolume(std::move(wall), {0, 1});
    t.scar_indicator = LabelVolume(std::move(scar), {0, 1});
    return t;
}

double param_grad_norm(Model& model) {
    double s = 0.0;
    for (const auto& p : model.params())
        for (double g : *p.grads) s += g * g;
    return std::sqrt(s);
}

void sgd_step(Model& model, double lr, double momentum, double weight_decay) {
    for (const auto& p : model.params()) {
        auto& w = *p.values;
        auto& g = *p.grads;
        auto& m = *p.momentum;
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = momentum * m[i] + g[i] + weight_decay * w[i];
            w[i] -= lr * m[i];
        }
    }
}

} // namespace

TrainResult train(const std::string& suite_dir, const SuiteManifest& manifest, const TrainConfig& cfg) {
    cfg.validate();

    std::vector<CaseTargets> cases;
    for (const auto& e : manifest.cases)
        if (e.role == "train") cases.push_back(prepare_case(load_case(suite_dir, e), cfg));
    if (cases.empty()) fail(errc::bad_argument, "suite has no training cases");
    const Dims dims = cases[0].data.intensity.dims();
    const Spacing sp = cases[0].data.intensity.spacing();
    for (const auto& c : cases)
        if (!(c.data.intensity.dims() == dims))
            fail(errc::grid_mismatch, "training cases are on different grids");

    TrainResult result;
    result.model = make_model(cfg.kind, dims, sp, cfg.seed, cfg.jobs);
    Model& model = *result.model;

    const double inv_n = 1.0 / static_cast<double>(dims.count());
    const double scale = cfg.mean_reduction ? inv_n : 1.0;

    std::vector<std::vector<double>> last_good;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        CaseTargets& t = cases[static_cast<std::size_t>(iter) % cases.size()];
        const Weights w = cfg.weights.at_iteration(iter);
        const double lr = cfg.lr0 * std::pow(0.1, iter / cfg.lr_step);

        const ModelOutputs out = model.forward(t.data.intensity);

        TrainLogRow row;
        row.iter = iter;
        row.lr = lr;
        row.lambda_la = w.lambda_la;
        row.lambda_scar = w.lambda_scar;
        row.lambda_m1 = w.lambda_m1;
        row.lambda_m2 = w.lambda_m2;

        Volume3 grad_la(dims, sp), grad_pn(dims, sp), grad_ps(dims, sp);
        double total = 0.0;

        if (cfg.arm == TrainArm::sesa) {
            LossTargets targets{&t.data.la_label, &t.la_dtm, &t.dpm_target, &t.m1};
            const LossReport rep = total_loss(out.pred_la, out.dpm_pred, targets, w, cfg.m2_mode, cfg.metric);
            row.bce_la = scale * rep.bce_la;
            row.se_la = scale * rep.se_la;
            row.se_scar = scale * rep.se_scar;
            row.sa_m1 = scale * rep.sa_m1;
            row.sa_m2 = scale * rep.sa_m2;
            total = scale * rep.total;
            for (std::size_t i = 0; i < grad_la.size(); ++i) {
                grad_la[i] = scale * rep.grad_pred_la[i];
                grad_pn[i] = scale * rep.grad_p_normal[i];
                grad_ps[i] = scale * rep.grad_p_scar[i];
            }
        } else if (cfg.arm == TrainArm::se) {
            const ScalarGrad b = bce(out.pred_la, t.data.la_label);
            const ScalarGrad s = se_la(out.pred_la, t.la_dtm, cfg.t_la);
            const DpmGrads sc = se_scar(out.dpm_pred, t.dpm_target, cfg.metric);
            row.bce_la = scale * b.value;
            row.se_la = scale * s.value;
            row.se_scar = scale * sc.value;
            total = scale * (b.value + w.lambda_la * s.value + w.lambda_scar * sc.value);
            for (std::size_t i = 0; i < grad_la.size(); ++i) {
                grad_la[i] = scale * (b.grad[i] + w.lambda_la * s.grad[i]);
                grad_pn[i] = scale * w.lambda_scar * sc.grad_normal[i];
                grad_ps[i] = scale * w.lambda_scar * sc.grad_scar[i];
            }
        } else {
            const ScalarGrad b = bce(out.pred_la, t.data.la_label);
            const ScalarGrad bn = bce(out.dpm_pred.p_normal, t.wall_indicator);
            const ScalarGrad bs = bce(out.dpm_pred.p_scar, t.scar_indicator);
            row.bce_la = scale * b.value;
            row.scar_bce = scale * (bn.value + bs.value);
            total = scale * (b.value + w.lambda_scar * (bn.value + bs.value));
            for (std::size_t i = 0; i < grad_la.size(); ++i) {
                grad_la[i] = scale * b.grad[i];
                grad_pn[i] = scale * w.lambda_scar * bn.grad[i];
                grad_ps[i] = scale * w.lambda_scar * bs.grad[i];
            }
        }
        row.total = total;

        if (!std::isfinite(total)) {
            result.diverged = true;
            if (!last_good.empty()) {
                auto blocks = model.params();
                for (std::size_t b = 0; b < blocks.size(); ++b) *blocks[b].values = last_good[b];
            }
            break;
        }

        last_good.clear();
        for (const auto& p : model.params()) last_good.push_back(*p.values);

        model.zero_grad();
        model.backward(grad_la, grad_pn, grad_ps);
        row.grad_norm = param_grad_norm(model);
        sgd_step(model, lr, cfg.momentum, cfg.weight_decay);

        bool params_finite = true;
        for (const auto& p : model.params())
            for (double v : *p.values)
                if (!std::isfinite(v)) { params_finite = false; break; }
        if (!params_finite) {
            result.diverged = true;
            auto blocks = model.params();
            for (std::size_t b = 0; b < blocks.size(); ++b) *blocks[b].values = last_good[b];
            break;
        }

        result.log.push_back(row);
        result.stopped_at = iter + 1;
    }
    return result;
}

InferenceResult infer_case(Model& model, const Volume3& intensity, double t_la) {
    ModelOutputs out = model.forward(intensity);
    Volume3 bin(out.pred_la.dims(), out.pred_la.spacing());
    std::size_t n_fg = 0;
    for (std::size_t i = 0; i < bin.size(); ++i) {
        bin[i] = out.pred_la[i] > t_la ? 1.0 : 0.0;
        n_fg += bin[i] != 0.0;
    }
    if (n_fg == 0) fail(errc::empty_la, "thresholded LA prediction is empty");
    LabelVolume la(std::move(bin), {0, 1});
    const SurfaceMask surf = hard_boundary_mask(la);
    LabeledSurface labeled = classify_surface(out.dpm_pred, surf);
    return {std::move(la), std::move(labeled), std::move(out)};
}

MetricsReport evaluate_outputs(const ModelOutputs& outputs, const PhantomCase& gt_case,
                               const std::string& case_id, SurfaceFrom surface_from,
                               double projection_radius, double hd_percentile, double t_la) {
    Volume3 bin(outputs.pred_la.dims(), outputs.pred_la.spacing());
    std::size_t n_fg = 0;
    for (std::size_t i = 0; i < bin.size(); ++i) {
        bin[i] = outputs.pred_la[i] > t_la ? 1.0 : 0.0;
        n_fg += bin[i] != 0.0;
    }
    if (n_fg == 0) fail(errc::empty_la, case_id + ": thresholded LA prediction is empty");
    const LabelVolume pred_la(std::move(bin), {0, 1});

    MetricsReport r;
    r.case_id = case_id;
    r.dice_la = dice_overlap(pred_la, gt_case.la_label);
    const SurfaceDistances sd = surface_distances(pred_la, gt_case.la_label, hd_percentile);
    r.asd_mm = sd.asd_mm;
    r.hd_mm = sd.hd_mm;

    const SurfaceMask ref = surface_from == SurfaceFrom::gt ? hard_boundary_mask(gt_case.la_label)
                                                            : hard_boundary_mask(pred_la);
    const LabeledSurface gt_surf = project_volume_labels(gt_case.wall_scar_label, ref, projection_radius);
    const LabeledSurface pred_surf = classify_surface(outputs.dpm_pred, ref);
    const SurfaceScarMetrics sm = surface_scar_metrics(pred_surf, gt_surf);
    r.accuracy = sm.accuracy;
    r.dice_s = sm.dice_s;
    r.dice_g = sm.dice_g;
    r.sensitivity = sm.sensitivity;
    r.specificity = sm.specificity;
    return r;
}

} // namespace lasq
