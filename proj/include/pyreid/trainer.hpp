#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pyreid/batching.hpp"
#include "pyreid/container.hpp"
#include "pyreid/data_synth.hpp"
#include "pyreid/evaluation.hpp"
#include "pyreid/losses.hpp"
#include "pyreid/model.hpp"
#include "pyreid/scheduler.hpp"
#include "pyreid/trace.hpp"

namespace pyreid {

inline constexpr std::int64_t kCheckpointVersion = 1;

struct TrainConfig {
    std::size_t n = 6;
    std::size_t feature_dim = 16;
    double margin = 1.4;
    std::size_t batch_size = 16;
    std::size_t P = 4;
    std::size_t K = 4;
    double alpha = 0.25;
    double gamma = 2.0;
    double switch_ratio = 0.16;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    std::size_t epochs = 30;
    std::vector<std::size_t> halving_epochs{15, 20, 25};
    std::uint64_t seed = 0;
    std::string mask = "111111";
    bool no_triplet_alternating = false;
    bool with_replacement_pk = false;
    // Compute (without gradient) the triplet loss on IdOnly batches so its
    // EMA keeps moving; off reproduces a frozen k_tp / p_tp.
    bool triplet_in_id_only = true;
    bool classifier_bias = false;
    bool squared_distance = false;
    std::string backbone = "desk";
    std::size_t checkpoint_every = 5;

    static TrainConfig desk() { return {}; }

    static TrainConfig paper() {
        TrainConfig c;
        c.feature_dim = 128;
        c.batch_size = 64;
        c.P = 8;
        c.K = 8;
        c.epochs = 120;
        c.halving_epochs = {60, 70, 80, 90};
        return c;
    }

    static TrainConfig profile(std::string_view name) {
        if (name == "desk") return desk();
        if (name == "paper") return paper();
        throw ConfigError("unknown profile '" + std::string(name) + "' (expected desk or paper)", "profile");
    }

    BranchMask branch_mask() const {
        try {
            return BranchMask::parse(mask);
        } catch (const Error& e) {
            throw ConfigError(e.what(), "mask");
        }
    }

    void validate() const {
        if (n == 0) throw ConfigError("n must be positive", "n");
        if (feature_dim == 0) throw ConfigError("feature_dim must be positive", "feature_dim");
        if (!(margin >= 0.0)) throw ConfigError("margin must be non-negative", "margin");
        if (batch_size == 0) throw ConfigError("batch_size must be positive", "batch_size");
        if (P * K != batch_size) {
            throw ConfigError("P*K = " + std::to_string(P * K) + " must equal batch_size = " + std::to_string(batch_size),
                              "batch_size");
        }
        SchedulerConfig{alpha, gamma, switch_ratio}.validate();
        if (!(lr > 0.0)) throw ConfigError("lr must be positive", "lr");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)", "momentum");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative", "weight_decay");
        for (std::size_t i = 1; i < halving_epochs.size(); ++i)
            if (halving_epochs[i] <= halving_epochs[i - 1])
                throw ConfigError("halving_epochs must be strictly increasing", "halving_epochs");
        const auto m = branch_mask();
        if (m.levels() != n) {
            throw ConfigError("mask '" + mask + "' has " + std::to_string(m.levels()) + " levels, n=" + std::to_string(n),
                              "mask");
        }
        if (backbone != "desk" && backbone != "identity")
            throw ConfigError("backbone must be desk or identity", "backbone");
        if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive", "checkpoint_every");
    }

    SchedulerConfig scheduler() const { return {alpha, gamma, switch_ratio}; }

    void set(const std::string& key, const std::string& value);
    std::string to_ini() const;
    std::uint64_t fingerprint() const;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out))
        throw ConfigError("invalid number '" + v + "' for key '" + key + "'", key);
    return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size() || v.empty())
        throw ConfigError("invalid non-negative integer '" + v + "' for key '" + key + "'", key);
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("invalid boolean '" + v + "' for key '" + key + "'", key);
}

} // namespace detail

inline void TrainConfig::set(const std::string& key, const std::string& raw) {
    using namespace detail;
    const std::string v = trim(raw);
    if (key == "n") n = parse_uint(key, v);
    else if (key == "feature_dim") feature_dim = parse_uint(key, v);
    else if (key == "margin") margin = parse_double(key, v);
    else if (key == "batch_size") batch_size = parse_uint(key, v);
    else if (key == "P") P = parse_uint(key, v);
    else if (key == "K") K = parse_uint(key, v);
    else if (key == "alpha") alpha = parse_double(key, v);
    else if (key == "gamma") gamma = parse_double(key, v);
    else if (key == "switch_ratio") switch_ratio = parse_double(key, v);
    else if (key == "lr") lr = parse_double(key, v);
    else if (key == "momentum") momentum = parse_double(key, v);
    else if (key == "weight_decay") weight_decay = parse_double(key, v);
    else if (key == "epochs") epochs = parse_uint(key, v);
    else if (key == "halving_epochs") {
        halving_epochs.clear();
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!trim(item).empty()) halving_epochs.push_back(parse_uint(key, trim(item)));
    } else if (key == "seed") seed = parse_uint(key, v);
    else if (key == "mask") mask = v;
    else if (key == "no_triplet_alternating") no_triplet_alternating = parse_bool(key, v);
    else if (key == "with_replacement_pk") with_replacement_pk = parse_bool(key, v);
    else if (key == "triplet_in_id_only") triplet_in_id_only = parse_bool(key, v);
    else if (key == "classifier_bias") classifier_bias = parse_bool(key, v);
    else if (key == "squared_distance") squared_distance = parse_bool(key, v);
    else if (key == "backbone") backbone = v;
    else if (key == "checkpoint_every") checkpoint_every = parse_uint(key, v);
    else throw ConfigError("unknown config key '" + key + "'", key);
}

inline std::string TrainConfig::to_ini() const {
    using detail::fmt_double;
    std::ostringstream os;
    std::string halvings;
    for (std::size_t i = 0; i < halving_epochs.size(); ++i) halvings += (i ? "," : "") + std::to_string(halving_epochs[i]);
    os << "n=" << n << "\nfeature_dim=" << feature_dim << "\nmargin=" << fmt_double(margin)
       << "\nbatch_size=" << batch_size << "\nP=" << P << "\nK=" << K << "\nalpha=" << fmt_double(alpha)
       << "\ngamma=" << fmt_double(gamma) << "\nswitch_ratio=" << fmt_double(switch_ratio)
       << "\nlr=" << fmt_double(lr) << "\nmomentum=" << fmt_double(momentum)
       << "\nweight_decay=" << fmt_double(weight_decay) << "\nepochs=" << epochs << "\nhalving_epochs=" << halvings
       << "\nseed=" << seed << "\nmask=" << mask << "\nno_triplet_alternating=" << no_triplet_alternating
       << "\nwith_replacement_pk=" << with_replacement_pk << "\ntriplet_in_id_only=" << triplet_in_id_only
       << "\nclassifier_bias=" << classifier_bias << "\nsquared_distance=" << squared_distance
       << "\nbackbone=" << backbone << "\ncheckpoint_every=" << checkpoint_every << "\n";
    return os.str();
}

// Everything that shapes the trajectory; run length and checkpoint cadence
// are excluded so a run can be extended from a checkpoint.
inline std::uint64_t TrainConfig::fingerprint() const {
    std::string key;
    std::istringstream is(to_ini());
    std::string line;
    while (std::getline(is, line))
        if (line.rfind("epochs=", 0) != 0 && line.rfind("checkpoint_every=", 0) != 0) key += line + "\n";
    return fnv1a64(key);
}

// key=value lines; '#' and ';' start comments; an optional [section] header is ignored.
inline void apply_ini(TrainConfig& cfg, std::istream& in) {
    std::string line;
    while (std::getline(in, line)) {
        line = detail::trim(line.substr(0, line.find_first_of("#;")));
        if (line.empty() || line.front() == '[') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line without '=': " + line, line);
        cfg.set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
}

inline TrainConfig load_config_file(const std::string& path, TrainConfig base = {}) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path + "'", "config");
    apply_ini(base, f);
    return base;
}

inline double lr_schedule(std::size_t epoch, double base_lr, const std::vector<std::size_t>& halving_epochs) {
    std::size_t k = 0;
    for (auto h : halving_epochs)
        if (h <= epoch) ++k;
    return base_lr * std::pow(0.5, static_cast<double>(k));
}

// Classical momentum SGD. Batch-norm affine parameters (decay == false) get no weight decay.
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, std::map<std::string, Tensor<T>>& velocity, double lr,
              double momentum, double weight_decay) {
    if (!(lr > 0.0)) throw ConfigError("sgd: lr must be positive", "lr");
    for (const auto* p : params) {
        if (!p->grad.all_finite()) throw DivergenceError("non-finite gradient in parameter '" + p->name + "'");
    }
    for (auto* p : params) {
        auto it = velocity.find(p->name);
        if (it == velocity.end()) it = velocity.emplace(p->name, Tensor<T>(p->value.shape(), T{0})).first;
        auto& v = it->second;
        if (v.shape() != p->value.shape()) throw ShapeError("sgd: momentum shape mismatch for '" + p->name + "'");
        const double wd = p->decay ? weight_decay : 0.0;
        auto W = p->value.data();
        auto G = p->grad.data();
        auto V = v.data();
        for (std::size_t i = 0; i < W.size(); ++i) {
            V[i] = static_cast<T>(momentum * V[i] + G[i] + wd * W[i]);
            W[i] = static_cast<T>(W[i] - lr * V[i]);
        }
    }
}

inline ModelConfig model_config(const TrainConfig& cfg, const Shape& image_shape, std::size_t num_ids) {
    if (image_shape.size() != 3) throw ShapeError("model_config: expected [C x H x W] images, got " + shape_str(image_shape));
    ModelConfig mc;
    mc.backbone = cfg.backbone == "identity" ? BackboneConfig::identity(image_shape[0]) : BackboneConfig::desk();
    mc.backbone.in_channels = image_shape[0];
    mc.pyramid.n = cfg.n;
    mc.pyramid.dim = cfg.feature_dim;
    mc.pyramid.num_ids = num_ids;
    mc.pyramid.classifier_bias = cfg.classifier_bias;
    mc.image_height = image_shape[1];
    mc.image_width = image_shape[2];
    return mc;
}

// ---------------------------------------------------------------------------
// Checkpoint helpers

inline void put_text(TensorArchive& ar, const std::string& name, const std::string& text) {
    std::vector<std::int64_t> v{static_cast<std::int64_t>(text.size())};
    for (unsigned char c : text) v.push_back(c);
    const std::size_t n = v.size();
    ar.put(name, Tensor<std::int64_t>(Shape{n}, std::move(v)));
}

inline std::string get_text(const TensorArchive& ar, const std::string& name) {
    const auto& t = ar.get<std::int64_t>(name);
    if (t.rank() != 1 || t.size() < 1 || static_cast<std::size_t>(t[0]) != t.size() - 1)
        throw FormatError("checkpoint: text entry '" + name + "' is malformed");
    std::string s;
    for (std::size_t i = 1; i < t.size(); ++i) s.push_back(static_cast<char>(t[i]));
    return s;
}

namespace detail {
inline std::map<std::string, std::string> geometry_fields(const std::string& g) {
    std::map<std::string, std::string> out;
    std::stringstream ss(g);
    std::string item;
    while (std::getline(ss, item, ';')) {
        const auto eq = item.find('=');
        out[item.substr(0, eq)] = eq == std::string::npos ? "" : item.substr(eq + 1);
    }
    return out;
}
} // namespace detail

// Names every geometry field that differs, e.g. "n: checkpoint 6, current 4".
inline std::string explain_geometry_mismatch(const std::string& saved, const std::string& current) {
    const auto a = detail::geometry_fields(saved);
    const auto b = detail::geometry_fields(current);
    std::string out;
    auto add = [&](const std::string& k, const std::string& x, const std::string& y) {
        if (!out.empty()) out += "; ";
        out += k + ": checkpoint " + (x.empty() ? "<none>" : x) + ", current " + (y.empty() ? "<none>" : y);
    };
    for (const auto& [k, v] : a) {
        auto it = b.find(k);
        const std::string w = it == b.end() ? "" : it->second;
        if (v != w) add(k, v, w);
    }
    for (const auto& [k, v] : b)
        if (!a.count(k)) add(k, "", v);
    return out;
}

inline void check_checkpoint_version(const TensorArchive& ar) {
    if (!ar.contains("meta/version")) throw FormatError("checkpoint: missing meta/version");
    const auto v = ar.get<std::int64_t>("meta/version")[0];
    if (v != kCheckpointVersion) {
        throw FormatError("checkpoint: version " + std::to_string(v) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
}

inline TrainConfig checkpoint_config(const TensorArchive& ar) {
    check_checkpoint_version(ar);
    TrainConfig cfg;
    std::istringstream is(get_text(ar, "meta/config"));
    apply_ini(cfg, is);
    return cfg;
}

// Image shape and class count the checkpointed model was built for.
inline std::pair<Shape, std::size_t> checkpoint_model_dims(const TensorArchive& ar) {
    const auto& t = ar.get<std::int64_t>("meta/model");
    if (t.size() != 4) throw FormatError("checkpoint: meta/model must hold 4 values");
    return {Shape{static_cast<std::size_t>(t[0]), static_cast<std::size_t>(t[1]), static_cast<std::size_t>(t[2])},
            static_cast<std::size_t>(t[3])};
}

template <typename T>
void save_model_state(ReIdModel<T>& model, TensorArchive& ar) {
    for (auto* p : model.all_parameters()) ar.put("param/" + p->name, p->value);
    for (auto& s : model.batch_norm_stats()) {
        ar.put("buffer/" + s.name + ".running_mean", s.stats->running_mean);
        ar.put("buffer/" + s.name + ".running_var", s.stats->running_var);
    }
}

template <typename T>
void load_model_state(ReIdModel<T>& model, const TensorArchive& ar) {
    auto assign = [](Tensor<T>& dst, const Tensor<T>& src, const std::string& name) {
        if (dst.shape() != src.shape()) {
            throw ConfigError("checkpoint: '" + name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                                  shape_str(dst.shape()),
                              "checkpoint");
        }
        dst = src;
    };
    for (auto* p : model.all_parameters()) assign(p->value, ar.get<T>("param/" + p->name), p->name);
    for (auto& s : model.batch_norm_stats()) {
        assign(s.stats->running_mean, ar.get<T>("buffer/" + s.name + ".running_mean"), s.name);
        assign(s.stats->running_var, ar.get<T>("buffer/" + s.name + ".running_var"), s.name);
    }
}

// ---------------------------------------------------------------------------

template <typename T = float>
class Trainer {
public:
    Trainer(TrainConfig cfg, const ReIdDataset& ds)
        : cfg_(std::move(cfg)), mask_(BranchMask::all(1)), view_(train_view(ds)),
          model_(build_model(cfg_, ds, view_)), sched_(cfg_.scheduler()),
          random_(view_.split, cfg_.batch_size, cfg_.seed),
          pk_(view_.split, cfg_.P, cfg_.K, cfg_.seed, cfg_.with_replacement_pk) {
        mask_ = cfg_.branch_mask();
        images_ = ds.stack(view_.sample_index).template cast<T>();
        per_image_ = images_.size() / images_.dim(0);
        trainable_ = model_.trainable_parameters(mask_);
    }

    const TrainConfig& config() const noexcept { return cfg_; }
    ReIdModel<T>& model() noexcept { return model_; }
    const DynamicScheduler& scheduler() const noexcept { return sched_; }
    const std::vector<TraceRow>& trace() const noexcept { return trace_; }
    const BranchMask& mask() const noexcept { return mask_; }
    const std::vector<Parameter<T>*>& trainable() const noexcept { return trainable_; }
    const RandomSampler& random_sampler() const noexcept { return random_; }

    std::size_t iterations_per_epoch() const { return random_.batches_per_epoch(); }
    std::size_t iteration() const noexcept { return iteration_; }
    std::size_t completed_epochs() const { return iteration_ / iterations_per_epoch(); }

    // Batch consumed by the latest step, for inspection.
    const MiniBatch& last_batch() const noexcept { return last_batch_; }
    bool last_step_used_triplet_gradient() const noexcept { return last_tp_grad_; }

    TraceRow step() {
        const std::size_t tau = iteration_ + 1;
        const double lr = lr_schedule(completed_epochs(), cfg_.lr, cfg_.halving_epochs);
        Phase phase = sched_.begin_iteration();
        if (cfg_.no_triplet_alternating) phase = tau % 2 == 1 ? Phase::id_only : Phase::id_only_pk;
        const bool pk = phase != Phase::id_only;
        last_batch_ = pk ? pk_.batch(pk_draws_++) : next_random_batch();

        Graph<T> g;
        auto x = g.constant(gather(last_batch_.indices));
        auto out = model_.forward(g, x, mask_, Mode::train);
        auto lid = id_loss(out.logits, last_batch_.labels);

        const bool tp_grad = phase == Phase::combined;
        std::optional<LossValue<T>> ltp;
        if (last_batch_.size() >= 2 && (tp_grad || cfg_.triplet_in_id_only)) {
            auto emb = tp_grad ? out.embedding : g.constant(out.embedding.value());
            ltp = triplet_loss(emb, last_batch_.labels, cfg_.margin, cfg_.squared_distance);
        }
        if (!std::isfinite(lid.scalar) || (ltp && !std::isfinite(ltp->scalar))) {
            throw DivergenceError("loss is not finite at iteration " + std::to_string(tau) +
                                  " (L_id=" + detail::fmt_double(lid.scalar) +
                                  (ltp ? ", L_tp=" + detail::fmt_double(ltp->scalar) : std::string()) + ")");
        }

        const auto& st = sched_.state();
        std::optional<Var<T>> objective;
        if (tp_grad) {
            if (st.id.fl != 0.0 || st.tp.fl != 0.0)
                objective = add(scale(lid.value, static_cast<T>(st.id.fl)), scale(ltp->value, static_cast<T>(st.tp.fl)));
        } else {
            objective = lid.value;
        }
        last_tp_grad_ = tp_grad && objective.has_value() && ltp->value.requires_grad();
        if (objective) {
            for (auto* p : trainable_) p->zero_grad();
            g.backward(*objective);
            try {
                sgd_step<T>(trainable_, velocity_, lr, cfg_.momentum, cfg_.weight_decay);
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " at iteration " + std::to_string(tau));
            }
        }

        sched_.observe(Task::id, lid.scalar);
        const bool tp_observed = ltp && !ltp->degenerate;
        if (tp_observed) sched_.observe(Task::tp, ltp->scalar);

        TraceRow row;
        row.tau = tau;
        row.phase = phase;
        row.l_id = lid.scalar;
        if (tp_observed) row.l_tp = ltp->scalar;
        if (st.id.observed) row.k_id = st.id.k;
        if (st.tp.observed) row.k_tp = st.tp.k;
        row.p_id = st.id.p;
        row.p_tp = st.tp.p;
        row.fl_id = st.id.fl;
        row.fl_tp = st.tp.fl;
        row.lr = lr;
        trace_.push_back(row);
        ++iteration_;
        return row;
    }

    // Runs until `epochs` epochs are complete; `on_epoch` fires after each.
    void run(std::size_t epochs, const std::function<void(std::size_t)>& on_epoch = {}) {
        const std::size_t target = epochs * iterations_per_epoch();
        while (iteration_ < target) {
            step();
            if (iteration_ % iterations_per_epoch() == 0 && on_epoch) on_epoch(completed_epochs());
        }
    }

    TensorArchive checkpoint() {
        TensorArchive ar;
        ar.put("meta/version", Tensor<std::int64_t>::vector({kCheckpointVersion}));
        ar.put("meta/fingerprint",
               Tensor<std::int64_t>::vector({std::bit_cast<std::int64_t>(cfg_.fingerprint())}));
        put_text(ar, "meta/geometry", model_.config().geometry());
        put_text(ar, "meta/config", cfg_.to_ini());
        const auto& mc = model_.config();
        ar.put("meta/model", Tensor<std::int64_t>::vector({static_cast<std::int64_t>(mc.backbone.in_channels),
                                                           static_cast<std::int64_t>(mc.image_height),
                                                           static_cast<std::int64_t>(mc.image_width),
                                                           static_cast<std::int64_t>(mc.pyramid.num_ids)}));
        save_model_state(model_, ar);
        for (auto* p : model_.all_parameters()) {
            auto it = velocity_.find(p->name);
            if (it != velocity_.end()) ar.put("momentum/" + p->name, it->second);
        }
        const auto& s = sched_.state();
        auto task = [](const TaskState& t) {
            return std::vector<double>{t.observed ? 1.0 : 0.0, t.k_prev, t.k, t.p, t.fl};
        };
        std::vector<double> sv = task(s.id);
        const auto tv = task(s.tp);
        sv.insert(sv.end(), tv.begin(), tv.end());
        sv.push_back(static_cast<double>(s.iteration));
        sv.push_back(static_cast<double>(static_cast<int>(s.phase)));
        ar.put("scheduler/state", Tensor<double>::vector(std::move(sv)));
        ar.put("counters", Tensor<std::int64_t>::vector({static_cast<std::int64_t>(iteration_),
                                                         static_cast<std::int64_t>(pk_draws_),
                                                         static_cast<std::int64_t>(rand_epoch_),
                                                         static_cast<std::int64_t>(rand_batch_),
                                                         std::bit_cast<std::int64_t>(cfg_.seed)}));
        if (!trace_.empty()) ar.put("trace", encode_trace());
        return ar;
    }

    void save_checkpoint(const std::filesystem::path& path) { checkpoint().save(path); }

    // Restores a checkpoint taken from a run with the same geometry and fingerprint.
    void restore(const TensorArchive& ar) {
        check_checkpoint_version(ar);
        const auto saved_geometry = get_text(ar, "meta/geometry");
        const auto geometry = model_.config().geometry();
        if (saved_geometry != geometry) {
            throw ConfigError("checkpoint geometry mismatch: " + explain_geometry_mismatch(saved_geometry, geometry),
                              "checkpoint");
        }
        const auto fp = std::bit_cast<std::uint64_t>(ar.get<std::int64_t>("meta/fingerprint")[0]);
        if (fp != cfg_.fingerprint()) {
            const auto saved = checkpoint_config(ar);
            std::string diff;
            std::istringstream a(saved.to_ini()), b(cfg_.to_ini());
            std::string la, lb;
            while (std::getline(a, la) && std::getline(b, lb))
                if (la != lb && la.rfind("epochs=", 0) != 0 && la.rfind("checkpoint_every=", 0) != 0)
                    diff += (diff.empty() ? "" : "; ") + la + " vs " + lb.substr(lb.find('=') + 1);
            throw ConfigError("checkpoint fingerprint mismatch: " + diff, "checkpoint");
        }
        load_model_state(model_, ar);
        velocity_.clear();
        for (auto* p : model_.all_parameters()) {
            const std::string key = "momentum/" + p->name;
            if (ar.contains(key)) velocity_.emplace(p->name, ar.get<T>(key));
        }
        const auto& sv = ar.get<double>("scheduler/state");
        if (sv.size() != 12) throw FormatError("checkpoint: scheduler/state must hold 12 values");
        auto task = [&](std::size_t o) {
            TaskState t;
            t.observed = sv[o] != 0.0;
            t.k_prev = sv[o + 1];
            t.k = sv[o + 2];
            t.p = sv[o + 3];
            t.fl = sv[o + 4];
            return t;
        };
        SchedulerState s;
        s.id = task(0);
        s.tp = task(5);
        s.iteration = static_cast<std::size_t>(sv[10]);
        s.phase = static_cast<Phase>(static_cast<int>(sv[11]));
        sched_.restore(s);
        const auto& c = ar.get<std::int64_t>("counters");
        if (c.size() != 5) throw FormatError("checkpoint: counters must hold 5 values");
        iteration_ = static_cast<std::size_t>(c[0]);
        pk_draws_ = static_cast<std::size_t>(c[1]);
        rand_epoch_ = static_cast<std::size_t>(c[2]);
        rand_batch_ = static_cast<std::size_t>(c[3]);
        trace_ = ar.contains("trace") ? decode_trace(ar.get<double>("trace")) : std::vector<TraceRow>{};
    }

private:
    static ReIdModel<T> build_model(const TrainConfig& cfg, const ReIdDataset& ds, const TrainView& view) {
        cfg.validate();
        if (view.sample_index.empty()) throw ConfigError("dataset has no train split", "dataset");
        const auto mc = model_config(cfg, ds.image_shape(), view.num_classes);
        return ReIdModel<T>(mc, Rng(cfg.seed).split("model"));
    }

    MiniBatch next_random_batch() {
        auto b = random_.batch(rand_epoch_, rand_batch_);
        if (++rand_batch_ == random_.batches_per_epoch()) {
            rand_batch_ = 0;
            ++rand_epoch_;
        }
        return b;
    }

    Tensor<T> gather(const std::vector<std::size_t>& idx) const {
        std::vector<T> data;
        data.reserve(idx.size() * per_image_);
        auto src = images_.data();
        for (auto i : idx)
            data.insert(data.end(), src.begin() + static_cast<std::ptrdiff_t>(i * per_image_),
                        src.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_image_));
        Shape s = images_.shape();
        s[0] = idx.size();
        return Tensor<T>(std::move(s), std::move(data));
    }

    Tensor<double> encode_trace() const {
        constexpr double nan = std::numeric_limits<double>::quiet_NaN();
        std::vector<double> v;
        for (const auto& r : trace_) {
            v.insert(v.end(), {static_cast<double>(r.tau), static_cast<double>(static_cast<int>(r.phase)),
                               r.l_id.value_or(nan), r.l_tp.value_or(nan), r.k_id.value_or(nan), r.k_tp.value_or(nan),
                               r.p_id, r.p_tp, r.fl_id, r.fl_tp, r.lr});
        }
        return Tensor<double>(Shape{trace_.size(), 11}, std::move(v));
    }

    static std::vector<TraceRow> decode_trace(const Tensor<double>& t) {
        if (t.rank() != 2 || t.dim(1) != 11) throw FormatError("checkpoint: trace must be [rows x 11]");
        std::vector<TraceRow> rows;
        auto opt = [](double v) -> std::optional<double> {
            if (std::isnan(v)) return std::nullopt;
            return v;
        };
        for (std::size_t i = 0; i < t.dim(0); ++i) {
            const double* r = &t[i * 11];
            TraceRow row;
            row.tau = static_cast<std::size_t>(r[0]);
            row.phase = static_cast<Phase>(static_cast<int>(r[1]));
            row.l_id = opt(r[2]);
            row.l_tp = opt(r[3]);
            row.k_id = opt(r[4]);
            row.k_tp = opt(r[5]);
            row.p_id = r[6];
            row.p_tp = r[7];
            row.fl_id = r[8];
            row.fl_tp = r[9];
            row.lr = r[10];
            rows.push_back(row);
        }
        return rows;
    }

    TrainConfig cfg_;
    BranchMask mask_;
    TrainView view_;
    ReIdModel<T> model_;
    DynamicScheduler sched_;
    RandomSampler random_;
    PkSampler pk_;
    Tensor<T> images_;
    std::size_t per_image_ = 0;
    std::vector<Parameter<T>*> trainable_;
    std::map<std::string, Tensor<T>> velocity_;
    std::vector<TraceRow> trace_;
    std::size_t iteration_ = 0;
    std::size_t pk_draws_ = 0;
    std::size_t rand_epoch_ = 0;
    std::size_t rand_batch_ = 0;
    MiniBatch last_batch_;
    bool last_tp_grad_ = false;
};

// Rebuilds the checkpointed model and scores it on the dataset's query/gallery split.
inline Metrics evaluate_checkpoint(const TensorArchive& ar, const ReIdDataset& ds,
                                   const std::optional<BranchMask>& mask = std::nullopt, bool l2_normalize = false) {
    const auto cfg = checkpoint_config(ar);
    const auto [shape, num_ids] = checkpoint_model_dims(ar);
    if (ds.image_shape() != shape) {
        throw ConfigError("evaluate: checkpoint expects images " + shape_str(shape) + ", dataset has " +
                              shape_str(ds.image_shape()),
                          "dataset");
    }
    ReIdModel<float> model(model_config(cfg, shape, num_ids), Rng(cfg.seed).split("model"));
    load_model_state(model, ar);
    return evaluate_model(model, ds, mask.value_or(cfg.branch_mask()), l2_normalize);
}

} // namespace pyreid
