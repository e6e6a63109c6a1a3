#pragma once

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flowscope/dataset.hpp"
#include "flowscope/model.hpp"
#include "flowscope/oracle.hpp"
#include "flowscope/schedule.hpp"

namespace flowscope {

// Uniform interface over oracle-backed, model-backed and guidance-wrapped
// velocity fields. Implementations must be deterministic given
// (xt, t, class) and safe to share read-only across threads.
class VelocityField {
public:
    virtual ~VelocityField() = default;
    virtual std::size_t dim() const = 0;
    virtual std::vector<double> evaluate(std::span<const double> xt, double t,
                                         std::optional<std::uint32_t> cls = {}) const = 0;
    virtual std::string_view tag() const = 0; // provenance label for trajectories
};

// Closed-form oracle field. With labels present and a class id given, the
// velocity is computed within that class subset; pass class_conditional=false
// to always use the whole dataset.
class OracleField final : public VelocityField {
public:
    OracleField(const Dataset& data, Schedule schedule, bool class_conditional = true)
        : data_(&data), schedule_(schedule), class_conditional_(class_conditional) {
        if (data.has_labels() && class_conditional_)
            for (std::uint32_t y = 0; y < data.num_classes(); ++y)
                views_.push_back(class_subset(data, y));
    }

    std::size_t dim() const override { return data_->dim(); }

    std::vector<double> evaluate(std::span<const double> xt, double t,
                                 std::optional<std::uint32_t> cls = {}) const override {
        if (cls && class_conditional_ && data_->has_labels()) {
            if (*cls >= views_.size())
                throw std::invalid_argument("OracleField: unknown class id " +
                                            std::to_string(*cls));
            return oracle_velocity(xt, t, views_[*cls], schedule_);
        }
        return oracle_velocity(xt, t, *data_, schedule_);
    }

    std::string_view tag() const override { return "oracle"; }

private:
    const Dataset* data_;
    Schedule schedule_;
    bool class_conditional_;
    std::vector<ClassView> views_;
};

class ModelField final : public VelocityField {
public:
    explicit ModelField(const MlpVelocityModel& model) : model_(&model) {}

    std::size_t dim() const override { return model_->dim(); }

    std::vector<double> evaluate(std::span<const double> xt, double t,
                                 std::optional<std::uint32_t> cls = {}) const override {
        return model_->forward(xt, t, cls);
    }

    std::string_view tag() const override { return "model"; }

private:
    const MlpVelocityModel* model_;
};

// Arbitrary callable as a field; handy for tests and analytic stand-ins.
class CallableField final : public VelocityField {
public:
    using Fn = std::function<std::vector<double>(std::span<const double>, double,
                                                 std::optional<std::uint32_t>)>;

    CallableField(std::size_t dim, Fn fn, std::string tag = "model")
        : dim_(dim), fn_(std::move(fn)), tag_(std::move(tag)) {}

    std::size_t dim() const override { return dim_; }

    std::vector<double> evaluate(std::span<const double> xt, double t,
                                 std::optional<std::uint32_t> cls = {}) const override {
        return fn_(xt, t, cls);
    }

    std::string_view tag() const override { return tag_; }

private:
    std::size_t dim_;
    Fn fn_;
    std::string tag_;
};

} // namespace flowscope
