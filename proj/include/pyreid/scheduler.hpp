#pragma once

// Dynamic two-task weighting.
//
// Each task keeps an exponential moving average k of its loss. The ratio
// p = min(k, k_prev) / k_prev estimates how likely the last step reduced the
// loss; the focal weight FL(p) = -(1 - p)^gamma log p is large for tasks that
// are still improving quickly and zero for stalled ones. While the ID task
// dominates (FL_tp / FL_id < switch_ratio) training uses random batches and
// the ID loss alone; otherwise it uses PK batches and FL_id L_id + FL_tp L_tp.

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>

#include "pyreid/errors.hpp"
#include "pyreid/losses.hpp"

namespace pyreid {

enum class Phase { id_only, combined, id_only_pk };

inline std::string_view phase_name(Phase p) {
    switch (p) {
    case Phase::id_only: return "IdOnly";
    case Phase::combined: return "Combined";
    case Phase::id_only_pk: return "IdOnlyPK";
    }
    return "?";
}

inline Phase parse_phase(std::string_view s) {
    if (s == "IdOnly") return Phase::id_only;
    if (s == "Combined") return Phase::combined;
    if (s == "IdOnlyPK") return Phase::id_only_pk;
    throw FormatError("unknown phase '" + std::string(s) + "'");
}

inline constexpr double kProbFloor = 1e-12;

inline double update_ema(double k_prev, double loss, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("alpha=" + std::to_string(alpha) + " outside [0, 1]", "alpha");
    }
    return alpha * loss + (1.0 - alpha) * k_prev;
}

inline double loss_reduction_prob(double k, double k_prev) {
    if (!(k_prev > 0.0)) throw ConfigError("loss_reduction_prob: k_prev must be positive", "k_prev");
    return std::max(kProbFloor, std::min(k, k_prev) / k_prev);
}

inline double focal_weight(double p, double gamma) {
    p = std::clamp(p, kProbFloor, 1.0);
    if (p == 1.0) return 0.0;
    return -std::pow(1.0 - p, gamma) * std::log(p);
}

// IdOnly iff FL_tp / FL_id < switch_ratio. FL_id == 0 with FL_tp > 0 selects
// Combined; both zero keeps `previous`.
inline Phase select_phase(double fl_id, double fl_tp, double switch_ratio, Phase previous = Phase::id_only) {
    if (fl_id == 0.0) {
        if (fl_tp > 0.0) return Phase::combined;
        return previous;
    }
    return fl_tp / fl_id < switch_ratio ? Phase::id_only : Phase::combined;
}

inline double combined_objective(double l_id, double l_tp, double fl_id, double fl_tp) {
    return fl_id * l_id + fl_tp * l_tp;
}

struct SchedulerConfig {
    double alpha = 0.25;
    double gamma = 2.0;
    double switch_ratio = 0.16;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]", "alpha");
        if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative", "gamma");
        if (!(switch_ratio > 0.0)) throw ConfigError("switch_ratio must be positive", "switch_ratio");
    }
};

struct TaskState {
    bool observed = false;
    double k_prev = 0.0;
    double k = 0.0;
    double p = 1.0;
    double fl = 0.0;

    bool operator==(const TaskState&) const = default;
};

struct SchedulerState {
    TaskState id;
    TaskState tp;
    std::size_t iteration = 0;
    Phase phase = Phase::id_only;

    bool operator==(const SchedulerState&) const = default;
};

class DynamicScheduler {
public:
    explicit DynamicScheduler(SchedulerConfig cfg = {}) : cfg_(cfg) {
        cfg_.validate();
        state_.id.p = kProbFloor; // p_id = 0 at start, stored at the floor
        state_.tp.p = 1.0;
    }

    const SchedulerConfig& config() const noexcept { return cfg_; }
    const SchedulerState& state() const noexcept { return state_; }
    void restore(const SchedulerState& s) { state_ = s; }

    // Start of iteration: weights from the latest p values, then the phase.
    Phase begin_iteration() {
        ++state_.iteration;
        state_.id.fl = focal_weight(state_.id.p, cfg_.gamma);
        state_.tp.fl = focal_weight(state_.tp.p, cfg_.gamma);
        state_.phase = select_phase(state_.id.fl, state_.tp.fl, cfg_.switch_ratio, state_.phase);
        return state_.phase;
    }

    // Record a computed loss. Tasks not observed in an iteration keep k and p.
    void observe(Task task, double loss) {
        auto& t = task == Task::id ? state_.id : state_.tp;
        if (!t.observed) {
            t.observed = true;
            t.k = loss; // k_{-1} = L_0
        }
        t.k_prev = t.k;
        t.k = update_ema(t.k_prev, loss, cfg_.alpha);
        // A zero EMA cannot decrease further.
        t.p = t.k_prev > 0.0 ? loss_reduction_prob(t.k, t.k_prev) : 1.0;
    }

private:
    SchedulerConfig cfg_;
    SchedulerState state_;
};

} // namespace pyreid
