// Copyright 2026 The mxlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop, dual (high/low precision) runs and checkpoints.

#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "mxlab/diagnostics.hpp"
#include "mxlab/errors.hpp"
#include "mxlab/model.hpp"
#include "mxlab/mx_container.hpp"
#include "mxlab/optimizer.hpp"
#include "mxlab/quant_config.hpp"
#include "mxlab/run_log.hpp"

namespace mxlab {

enum class Schedule : std::uint8_t { constant, cosine };
enum class Precision : std::uint8_t { fp64, fp32 };
/// How the reference gradient of a dual run is obtained: re-evaluated at the
/// low-precision twin's parameters, or taken from the separately trained
/// high-precision twin at the same step.
enum class EpsMode : std::uint8_t { reeval, cross };

inline std::string_view to_string(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }
inline std::string_view to_string(Precision p) { return p == Precision::fp64 ? "fp64" : "fp32"; }
inline std::string_view to_string(EpsMode m) { return m == EpsMode::reeval ? "reeval" : "cross"; }

inline std::optional<Schedule> parse_schedule(std::string_view s) {
    if (s == "constant") return Schedule::constant;
    if (s == "cosine") return Schedule::cosine;
    return std::nullopt;
}
inline std::optional<Precision> parse_precision(std::string_view s) {
    if (s == "fp64") return Precision::fp64;
    if (s == "fp32") return Precision::fp32;
    return std::nullopt;
}
inline std::optional<EpsMode> parse_eps_mode(std::string_view s) {
    if (s == "reeval") return EpsMode::reeval;
    if (s == "cross") return EpsMode::cross;
    return std::nullopt;
}

inline constexpr std::uint64_t kDefaultTeacherSeed = 1000003;
inline constexpr double kDivergenceLoss = 1e12;

struct TrainConfig {
    double lr = 1e-3;  // constant rate, or the cosine start
    Schedule schedule = Schedule::constant;
    double lr_end = 1e-5;  // cosine end
    OptimizerKind optimizer = OptimizerKind::adam;
    std::size_t batch = 2048;
    std::uint64_t steps = 8000;
    double label_noise = 1e-3;
    std::uint64_t data_seed = 0;
    std::uint64_t teacher_seed = kDefaultTeacherSeed;
    Precision precision = Precision::fp32;
    QuantConfig quant{};
    EpsMode eps_mode = EpsMode::reeval;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train.lr", "learning rate must be > 0");
        if (schedule == Schedule::cosine && !(lr_end > 0.0)) throw ConfigError("train.lr_end", "must be > 0");
        if (batch < 1) throw ConfigError("train.batch", "batch must be >= 1");
        if (steps < 1) throw ConfigError("train.steps", "steps must be >= 1");
        if (label_noise < 0.0) throw ConfigError("train.label_noise", "must be >= 0");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline double lr_at(Schedule schedule, double lr, double lr_end, std::uint64_t step, std::uint64_t total) {
    if (step > total) throw InvalidInput("lr_at: step beyond schedule length");
    if (schedule == Schedule::constant) return lr;
    const double frac = total == 0 ? 1.0 : static_cast<double>(step) / static_cast<double>(total);
    return lr_end + 0.5 * (lr - lr_end) * (1.0 + std::cos(std::numbers::pi * frac));
}

inline double lr_at(const TrainConfig& tc, std::uint64_t step) {
    return lr_at(tc.schedule, tc.lr, tc.lr_end, step, tc.steps);
}

enum class RunStatus : std::uint8_t { running, completed, diverged, diverged_nan };

inline std::string_view to_string(RunStatus s) {
    switch (s) {
        case RunStatus::running: return "running";
        case RunStatus::completed: return "completed";
        case RunStatus::diverged: return "diverged";
        case RunStatus::diverged_nan: return "diverged_nan";
    }
    return "?";
}

inline std::optional<RunStatus> parse_run_status(std::string_view s) {
    for (auto v : {RunStatus::running, RunStatus::completed, RunStatus::diverged, RunStatus::diverged_nan})
        if (to_string(v) == s) return v;
    return std::nullopt;
}

/// Called before each step's computation; interventions edit `quant` here.
using BeforeStepHook = std::function<void(std::uint64_t step, QuantConfig& quant)>;

/// One training run's mutable state. Data, initialization and the optimizer
/// are pure functions of the configs and the step index, so a trainer
/// restored from a checkpoint continues bit-identically.
template <typename T>
class Trainer {
public:
    Trainer(ModelConfig mc, TrainConfig tc)
        : mc_(std::move(mc)),
          tc_(std::move(tc)),
          student_(build_student<T>(mc_)),
          teacher_(build_teacher<T>(mc_, tc_.teacher_seed)),
          opt_(OptimizerState<T>::init(tc_.optimizer, student_)),
          quant_(tc_.quant),
          start_(std::chrono::steady_clock::now()) {
        tc_.validate();
    }

    const ModelConfig& model_config() const { return mc_; }
    const TrainConfig& train_config() const { return tc_; }
    const Model<T>& student() const { return student_; }
    Model<T>& student() { return student_; }
    const Model<T>& teacher() const { return teacher_; }
    const OptimizerState<T>& optimizer() const { return opt_; }
    const QuantConfig& quant() const { return quant_; }
    QuantConfig& quant() { return quant_; }
    std::uint64_t step() const { return step_; }
    RunStatus status() const { return status_; }
    bool finished() const { return status_ != RunStatus::running; }

    void set_before_step(BeforeStepHook f) { before_ = std::move(f); }
    void set_timing(bool on) { timing_ = on; }

    Batch<T> batch(std::uint64_t step) const {
        return generate_batch(tc_.data_seed, step, tc_.batch, teacher_, tc_.label_noise);
    }

    LossAndGrad<T> evaluate(const Batch<T>& b, const QuantConfig& q) const { return loss_and_grad(student_, b.x, b.y, q); }

    /// Runs the before-step hook for the current step.
    void prepare() {
        if (before_) before_(step_, quant_);
    }

    /// Logs the step from an evaluation at the current parameters, checks for
    /// divergence and applies the optimizer update.
    RunRecord apply(const LossAndGrad<T>& e) {
        RunRecord r;
        r.step = step_;
        r.loss = e.loss;
        r.grad_norm = norm(e.grad);
        r.lr = lr_at(tc_, step_);
        for (const auto& [name, st] : named_site_stats(e.stats)) r.last_bin_fraction.emplace_back(name, st.fraction());
        if (timing_) r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        if (!std::isfinite(e.loss) || !std::isfinite(r.grad_norm)) {
            status_ = RunStatus::diverged_nan;
        } else if (e.loss > kDivergenceLoss) {
            status_ = RunStatus::diverged;
        } else {
            opt_.step(student_, e.grad, r.lr);
        }
        ++step_;
        if (status_ == RunStatus::running && step_ >= tc_.steps) status_ = RunStatus::completed;
        return r;
    }

    /// Record for a step whose computation overflowed (non-finite operand).
    RunRecord abort_nan() {
        RunRecord r;
        r.step = step_;
        r.loss = std::numeric_limits<double>::quiet_NaN();
        r.grad_norm = std::numeric_limits<double>::quiet_NaN();
        r.lr = lr_at(tc_, step_);
        if (timing_) r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        ++step_;
        status_ = RunStatus::diverged_nan;
        return r;
    }

    /// evaluate + apply at the current step with the current quantization.
    RunRecord advance() {
        prepare();
        const Batch<T> b = batch(step_);
        std::optional<LossAndGrad<T>> e;
        try {
            e = evaluate(b, quant_);
        } catch (const NonFiniteValue&) {
            return abort_nan();
        } catch (const InvalidInput&) {  // non-finite element reaching a quantizer
            return abort_nan();
        }
        return apply(*e);
    }

    // -- checkpoints -------------------------------------------------------
    //   "MXCK", u16 version, u8 sizeof(T), u16 + bytes fingerprint, u64 step,
    //   u8 status, quant config, u8 optimizer kind, u64 optimizer t,
    //   u64 parameter count, then raw little-endian parameters, first moments
    //   (if any) and second moments (if any) in flattening order.

    void save_checkpoint(std::ostream& os, const std::string& fingerprint) const {
        os.write("MXCK", 4);
        detail::put_le<std::uint16_t>(os, kCheckpointVersion);
        detail::put_le<std::uint8_t>(os, sizeof(T));
        detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(fingerprint.size()));
        os.write(fingerprint.data(), static_cast<std::streamsize>(fingerprint.size()));
        detail::put_le<std::uint64_t>(os, step_);
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(status_));
        write_quant(os, quant_);
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(opt_.kind));
        detail::put_le<std::uint64_t>(os, opt_.t);
        detail::put_le<std::uint64_t>(os, student_.parameter_count());
        write_params(os, student_);
        if (opt_.kind != OptimizerKind::sgd) write_params(os, opt_.m);
        if (opt_.kind == OptimizerKind::adam) write_params(os, opt_.v);
        if (!os) throw IoError("failed writing checkpoint");
    }

    /// Restores a checkpoint written by a trainer with the same configs.
    void load_checkpoint(std::istream& is, const std::string& expected_fingerprint) {
        char magic[4] = {};
        is.read(magic, 4);
        if (!is || std::string(magic, 4) != "MXCK") throw IoError("not a checkpoint (bad magic)");
        if (detail::get_le<std::uint16_t>(is) != kCheckpointVersion) throw IoError("unsupported checkpoint version");
        if (detail::get_le<std::uint8_t>(is) != sizeof(T)) throw IoError("checkpoint working precision differs");
        std::string fp(detail::get_le<std::uint16_t>(is), '\0');
        is.read(fp.data(), static_cast<std::streamsize>(fp.size()));
        if (!is) throw IoError("truncated checkpoint");
        if (fp != expected_fingerprint)
            throw IoError("checkpoint fingerprint " + fp + " does not match config " + expected_fingerprint);
        step_ = detail::get_le<std::uint64_t>(is);
        const auto st = detail::get_le<std::uint8_t>(is);
        if (st > static_cast<std::uint8_t>(RunStatus::diverged_nan)) throw IoError("bad run status in checkpoint");
        status_ = static_cast<RunStatus>(st);
        quant_ = read_quant(is);
        if (detail::get_le<std::uint8_t>(is) != static_cast<std::uint8_t>(opt_.kind))
            throw IoError("checkpoint optimizer differs from config");
        opt_.t = detail::get_le<std::uint64_t>(is);
        if (detail::get_le<std::uint64_t>(is) != student_.parameter_count())
            throw IoError("checkpoint parameter count differs from model");
        read_params(is, student_);
        if (opt_.kind != OptimizerKind::sgd) read_params(is, opt_.m);
        if (opt_.kind == OptimizerKind::adam) read_params(is, opt_.v);
    }

private:
    static constexpr std::uint16_t kCheckpointVersion = 1;

    static void write_quant(std::ostream& os, const QuantConfig& q) {
        detail::put_le<std::uint8_t>(os, q.forward_only);
        detail::put_le<std::uint8_t>(os, q.bf16_vector_ops);
        for (const auto& f : q.formats) {
            detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(f.kind));
            detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(f.mx.element));
            detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(f.mx.block_size));
            detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(f.mx.rounding));
            detail::put_le<std::int8_t>(os, static_cast<std::int8_t>(f.mx.exponent_offset));
            detail::put_le<std::uint8_t>(os, (f.mx.conditional_bump ? 1 : 0) | (f.mx.flush_subnormals ? 2 : 0));
        }
    }

    static QuantConfig read_quant(std::istream& is) {
        QuantConfig q;
        q.forward_only = detail::get_le<std::uint8_t>(is) != 0;
        q.bf16_vector_ops = detail::get_le<std::uint8_t>(is) != 0;
        for (auto& f : q.formats) {
            const auto kind = detail::get_le<std::uint8_t>(is);
            const auto elem = detail::get_le<std::uint8_t>(is);
            if (kind > 2 || elem > static_cast<std::uint8_t>(FormatId::e3m2)) throw IoError("bad quant config in checkpoint");
            f.kind = static_cast<QuantFormat::Kind>(kind);
            f.mx.element = static_cast<FormatId>(elem);
            f.mx.block_size = detail::get_le<std::uint16_t>(is);
            f.mx.rounding = static_cast<RoundingMode>(detail::get_le<std::uint8_t>(is));
            f.mx.exponent_offset = detail::get_le<std::int8_t>(is);
            const auto flags = detail::get_le<std::uint8_t>(is);
            f.mx.conditional_bump = flags & 1;
            f.mx.flush_subnormals = flags & 2;
        }
        return q;
    }

    static void write_params(std::ostream& os, const Model<T>& m) {
        for (const auto* t : m.tensors())
            os.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(T)));
    }
    static void read_params(std::istream& is, Model<T>& m) {
        for (auto* t : m.tensors()) {
            is.read(reinterpret_cast<char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(T)));
            if (!is) throw IoError("truncated checkpoint");
        }
    }

    ModelConfig mc_;
    TrainConfig tc_;
    Model<T> student_;
    Model<T> teacher_;
    OptimizerState<T> opt_;
    QuantConfig quant_;
    std::uint64_t step_ = 0;
    RunStatus status_ = RunStatus::running;
    BeforeStepHook before_;
    bool timing_ = false;
    std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Runs

struct RunResult {
    std::vector<RunRecord> records;
    RunStatus status = RunStatus::running;
};

struct RunHooks {
    std::function<void(const RunRecord&)> on_record;
    BeforeStepHook before_step;
    bool timing = false;
};

template <typename T>
RunResult train_run(Trainer<T>& tr, const RunHooks& hooks = {}) {
    if (hooks.before_step) tr.set_before_step(hooks.before_step);
    tr.set_timing(hooks.timing);
    RunResult res;
    while (!tr.finished()) {
        res.records.push_back(tr.advance());
        if (hooks.on_record) hooks.on_record(res.records.back());
    }
    res.status = tr.status();
    return res;
}

template <typename T>
RunResult train_run(const ModelConfig& mc, const TrainConfig& tc, const RunHooks& hooks = {}) {
    Trainer<T> tr(mc, tc);
    return train_run(tr, hooks);
}

struct DualResult {
    RunResult hp;
    RunResult lp;
    std::vector<PairedRecord> paired;
};

struct DualHooks {
    std::function<void(const RunRecord&)> on_hp;
    std::function<void(const RunRecord&)> on_lp;
    std::function<void(const PairedRecord&)> on_paired;
    bool timing = false;
};

namespace detail {

template <typename T>
PairedRecord pair_gradients(std::uint64_t step, const LossAndGrad<T>& lp, const LossAndGrad<T>& hp) {
    PairedRecord p;
    p.step = step;
    p.eps_norm = distance(lp.grad, hp.grad);
    p.g_norm = norm(hp.grad);
    p.zeta_lower = p.g_norm > 0.0 ? zeta_lower_bound(p.eps_norm, p.g_norm) : std::numeric_limits<double>::quiet_NaN();
    try {
        p.cosine = cosine_alignment(lp.grad, hp.grad);
    } catch (const UndefinedRatio&) {
        p.cosine = std::numeric_limits<double>::quiet_NaN();
    }
    p.loss_hp = hp.loss;
    p.loss_lp = lp.loss;
    return p;
}

inline void check_dual_configs(const TrainConfig& hp, const TrainConfig& lp) {
    TrainConfig a = hp, b = lp;
    a.quant = b.quant = QuantConfig{};
    if (!(a == b)) throw ConfigError("train", "dual run configs may differ only in quantization");
}

}  // namespace detail

/// Two twins from identical initialization and batch order that differ only in
/// quantization. In reeval mode the high-precision twin is trained first, then
/// the low-precision twin, with the reference gradient re-evaluated at the low
/// precision parameters on the same batch. In cross mode the twins advance in
/// lockstep and are compared at their own parameters.
template <typename T>
DualResult dual_run(const ModelConfig& mc, const TrainConfig& hp_cfg, const TrainConfig& lp_cfg,
                    const DualHooks& hooks = {}) {
    detail::check_dual_configs(hp_cfg, lp_cfg);
    DualResult out;
    Trainer<T> hp(mc, hp_cfg), lp(mc, lp_cfg);
    hp.set_timing(hooks.timing);
    lp.set_timing(hooks.timing);
    auto emit = [](RunResult& r, const RunRecord& rec, const std::function<void(const RunRecord&)>& f) {
        r.records.push_back(rec);
        if (f) f(rec);
    };
    auto eval_or_nan = [](const Trainer<T>& tr, const Batch<T>& b, const QuantConfig& q) -> std::optional<LossAndGrad<T>> {
        try {
            return tr.evaluate(b, q);
        } catch (const NonFiniteValue&) {
        } catch (const InvalidInput&) {
        }
        return std::nullopt;
    };

    if (hp_cfg.eps_mode == EpsMode::reeval) {
        while (!hp.finished()) emit(out.hp, hp.advance(), hooks.on_hp);
        while (!lp.finished()) {
            const auto b = lp.batch(lp.step());
            auto e_lp = eval_or_nan(lp, b, lp.quant());
            if (!e_lp) {
                emit(out.lp, lp.abort_nan(), hooks.on_lp);
                break;
            }
            if (auto e_hp = eval_or_nan(lp, b, hp_cfg.quant)) {
                out.paired.push_back(detail::pair_gradients(lp.step(), *e_lp, *e_hp));
                if (hooks.on_paired) hooks.on_paired(out.paired.back());
            }
            emit(out.lp, lp.apply(*e_lp), hooks.on_lp);
        }
    } else {
        while (!hp.finished() || !lp.finished()) {
            std::optional<LossAndGrad<T>> e_hp, e_lp;
            const std::uint64_t step = std::max(hp.finished() ? 0 : hp.step(), lp.finished() ? 0 : lp.step());
            const auto b = (hp.finished() ? lp : hp).batch(step);
            if (!hp.finished()) {
                e_hp = eval_or_nan(hp, b, hp.quant());
                if (!e_hp) emit(out.hp, hp.abort_nan(), hooks.on_hp);
            }
            if (!lp.finished()) {
                e_lp = eval_or_nan(lp, b, lp.quant());
                if (!e_lp) emit(out.lp, lp.abort_nan(), hooks.on_lp);
            }
            if (e_hp && e_lp) {
                out.paired.push_back(detail::pair_gradients(step, *e_lp, *e_hp));
                if (hooks.on_paired) hooks.on_paired(out.paired.back());
            }
            if (e_hp) emit(out.hp, hp.apply(*e_hp), hooks.on_hp);
            if (e_lp) emit(out.lp, lp.apply(*e_lp), hooks.on_lp);
        }
    }
    out.hp.status = hp.status();
    out.lp.status = lp.status();
    return out;
}

}  // namespace mxlab
