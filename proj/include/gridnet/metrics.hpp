#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridnet/grid_model.hpp"
#include "gridnet/ops.hpp"

namespace gridnet {

/// counts[truth][pred] over non-ignored pixels.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes = 0);

    int num_classes() const { return num_classes_; }
    std::int64_t at(int truth, int pred) const { return counts_[index(truth, pred)]; }
    std::int64_t ignored() const { return ignored_; }
    std::int64_t total() const;

    /// Throws when the maps differ in size or a class id is out of range.
    void accumulate(std::span<const int> pred, std::span<const int> truth, int ignore_label = kIgnoreLabel);
    void merge(const ConfusionMatrix& other);

    std::int64_t tp(int c) const { return at(c, c); }
    std::int64_t fp(int c) const;
    std::int64_t fn(int c) const;

    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::size_t index(int truth, int pred) const {
        return static_cast<std::size_t>(truth) * static_cast<std::size_t>(num_classes_) + static_cast<std::size_t>(pred);
    }
    int num_classes_ = 0;
    std::vector<std::int64_t> counts_;
    std::int64_t ignored_ = 0;
};

/// Per-class scores; nullopt where a class is undefined. The mean runs over
/// defined entries only.
struct ClassScores {
    std::vector<std::optional<double>> per_class;
    std::optional<double> mean;
};

/// TP / (TP + FP + FN); classes absent from both truth and prediction are undefined.
ClassScores iou(const ConfusionMatrix& m);

/// Per-class mean ground-truth instance size, gathered in a first pass.
class InstanceSizes {
public:
    explicit InstanceSizes(int num_classes = 0);
    void accumulate(std::span<const int> truth, std::span<const int> instances, int ignore_label = kIgnoreLabel);
    /// Mean size of the instances of class c; nullopt when c has none.
    std::optional<double> average(int c) const;
    int num_classes() const { return static_cast<int>(total_pixels_.size()); }

private:
    std::vector<double> total_pixels_;
    std::vector<std::int64_t> instance_count_;
};

/// Instance-weighted TP and FN (weight avg_size_c / instance size), plain FP.
class InstanceIoU {
public:
    explicit InstanceIoU(const InstanceSizes& sizes);
    void accumulate(std::span<const int> pred, std::span<const int> truth, std::span<const int> instances,
                    int ignore_label = kIgnoreLabel);
    void merge(const InstanceIoU& other);
    /// Defined only for classes with ground-truth instances.
    ClassScores scores() const;

    double itp(int c) const { return itp_[c]; }
    double ifn(int c) const { return ifn_[c]; }
    std::int64_t fp(int c) const { return fp_[c]; }

private:
    std::vector<std::optional<double>> avg_;
    std::vector<double> itp_;
    std::vector<double> ifn_;
    std::vector<std::int64_t> fp_;
};

/// Surjection from class ids onto coarser categories.
struct CategoryMap {
    std::vector<int> category_of;
    std::vector<std::string> names;

    int num_categories() const { return static_cast<int>(names.size()); }
    /// Throws unless every class maps to a named category and every category is hit.
    void validate(int num_classes) const;
    /// Remaps a class map; ignore pixels pass through.
    std::vector<int> apply(std::span<const int> classes, int ignore_label = kIgnoreLabel) const;

    static CategoryMap identity(int num_classes);
    /// Synthetic scenes: class 0 is "background", every shape class is "object".
    static CategoryMap synthetic(int num_classes);
};

/// Prediction, ground truth and instance ids of one evaluated image.
struct EvalSample {
    std::vector<int> pred;
    std::vector<int> truth;
    std::vector<int> instances;
};

struct MetricsReport {
    ClassScores class_iou;
    ClassScores class_iiou;
    ClassScores category_iou;
    ClassScores category_iiou;
    std::vector<std::int64_t> truth_pixels;
    std::int64_t ignored_pixels = 0;
    ConfusionMatrix confusion;

    nlohmann::ordered_json to_json() const;
};

/// Two passes: instance sizes over the whole set, then scoring.
MetricsReport evaluate_samples(std::span<const EvalSample> samples, int num_classes, const CategoryMap& categories,
                               int ignore_label = kIgnoreLabel);

/// Per-pixel majority over label maps; ties go to the lowest class id.
std::vector<int> majority_vote(std::span<const std::vector<int>> votes, int num_classes);

/// Four-scale set for the majority vote: 1, 1/1.5, 1/2, 1/2.5.
inline const std::vector<double> kDefaultScales = {1.0, 1.0 / 1.5, 1.0 / 2.0, 1.0 / 2.5};

struct MultiscaleResult {
    std::vector<int> labels;
    std::vector<double> used_scales;
    std::vector<std::string> warnings;
};

/// Eval-mode forward at every scale, argmax, nearest-resize back, vote.
/// Scales whose resized image is below the grid's minimum side are skipped
/// with a warning; throws when none remain.
MultiscaleResult multiscale_predict(GridModel<float>& model, const std::vector<float>& image, int height, int width,
                                    std::span<const double> scales);

}  // namespace gridnet
