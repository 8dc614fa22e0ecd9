#include "gridnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "gridnet/scene.hpp"

namespace gridnet {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 0) {
        throw std::invalid_argument("confusion matrix: negative class count");
    }
}

std::int64_t ConfusionMatrix::total() const {
    std::int64_t t = 0;
    for (std::int64_t v : counts_) {
        t += v;
    }
    return t;
}

void ConfusionMatrix::accumulate(std::span<const int> pred, std::span<const int> truth, int ignore_label) {
    if (pred.size() != truth.size()) {
        throw std::invalid_argument("confusion: " + std::to_string(pred.size()) + " predictions for " +
                                    std::to_string(truth.size()) + " labels");
    }
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const int t = truth[k];
        if (t == ignore_label) {
            ++ignored_;
            continue;
        }
        const int p = pred[k];
        if (t < 0 || t >= num_classes_ || p < 0 || p >= num_classes_) {
            throw std::invalid_argument("confusion: class id outside [0," + std::to_string(num_classes_) +
                                        ") at pixel " + std::to_string(k));
        }
        ++counts_[index(t, p)];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.num_classes_ != num_classes_) {
        throw std::invalid_argument("confusion merge: class counts differ");
    }
    for (std::size_t k = 0; k < counts_.size(); ++k) {
        counts_[k] += other.counts_[k];
    }
    ignored_ += other.ignored_;
}

std::int64_t ConfusionMatrix::fp(int c) const {
    std::int64_t s = 0;
    for (int t = 0; t < num_classes_; ++t) {
        if (t != c) {
            s += at(t, c);
        }
    }
    return s;
}

std::int64_t ConfusionMatrix::fn(int c) const {
    std::int64_t s = 0;
    for (int p = 0; p < num_classes_; ++p) {
        if (p != c) {
            s += at(c, p);
        }
    }
    return s;
}

namespace {

std::optional<double> mean_of(const std::vector<std::optional<double>>& v) {
    double sum = 0.0;
    int n = 0;
    for (const auto& x : v) {
        if (x) {
            sum += *x;
            ++n;
        }
    }
    if (n == 0) {
        return std::nullopt;
    }
    return sum / n;
}

}  // namespace

ClassScores iou(const ConfusionMatrix& m) {
    ClassScores out;
    for (int c = 0; c < m.num_classes(); ++c) {
        const std::int64_t tp = m.tp(c);
        const std::int64_t denom = tp + m.fp(c) + m.fn(c);
        if (denom == 0) {
            out.per_class.emplace_back(std::nullopt);
        } else {
            out.per_class.emplace_back(static_cast<double>(tp) / static_cast<double>(denom));
        }
    }
    out.mean = mean_of(out.per_class);
    return out;
}

InstanceSizes::InstanceSizes(int num_classes)
    : total_pixels_(static_cast<std::size_t>(num_classes), 0.0),
      instance_count_(static_cast<std::size_t>(num_classes), 0) {}

void InstanceSizes::accumulate(std::span<const int> truth, std::span<const int> instances, int ignore_label) {
    if (truth.size() != instances.size()) {
        throw std::invalid_argument("instance sizes: label and instance maps differ in size");
    }
    std::map<int, std::pair<int, std::int64_t>> sizes;  // id -> (class, pixels)
    for (std::size_t k = 0; k < truth.size(); ++k) {
        if (instances[k] == 0 || truth[k] == ignore_label) {
            continue;
        }
        if (truth[k] < 0 || truth[k] >= num_classes()) {
            throw std::invalid_argument("instance sizes: class id out of range");
        }
        auto [it, fresh] = sizes.try_emplace(instances[k], truth[k], 0);
        if (!fresh && it->second.first != truth[k]) {
            throw std::invalid_argument("instance " + std::to_string(instances[k]) + " spans two classes");
        }
        ++it->second.second;
    }
    for (const auto& [id, cs] : sizes) {
        total_pixels_[cs.first] += static_cast<double>(cs.second);
        ++instance_count_[cs.first];
    }
}

std::optional<double> InstanceSizes::average(int c) const {
    if (instance_count_[c] == 0) {
        return std::nullopt;
    }
    return total_pixels_[c] / static_cast<double>(instance_count_[c]);
}

InstanceIoU::InstanceIoU(const InstanceSizes& sizes)
    : itp_(static_cast<std::size_t>(sizes.num_classes()), 0.0),
      ifn_(static_cast<std::size_t>(sizes.num_classes()), 0.0),
      fp_(static_cast<std::size_t>(sizes.num_classes()), 0) {
    for (int c = 0; c < sizes.num_classes(); ++c) {
        avg_.push_back(sizes.average(c));
    }
}

void InstanceIoU::accumulate(std::span<const int> pred, std::span<const int> truth, std::span<const int> instances,
                             int ignore_label) {
    if (pred.size() != truth.size() || truth.size() != instances.size()) {
        throw std::invalid_argument("iIoU: prediction, label and instance maps differ in size");
    }
    const int nc = static_cast<int>(avg_.size());
    std::map<int, std::int64_t> sizes;
    for (std::size_t k = 0; k < truth.size(); ++k) {
        if (instances[k] != 0 && truth[k] != ignore_label) {
            ++sizes[instances[k]];
        }
    }
    for (std::size_t k = 0; k < truth.size(); ++k) {
        const int t = truth[k];
        if (t == ignore_label) {
            continue;
        }
        const int p = pred[k];
        if (t < 0 || t >= nc || p < 0 || p >= nc) {
            throw std::invalid_argument("iIoU: class id out of range at pixel " + std::to_string(k));
        }
        if (p != t) {
            ++fp_[p];
        }
        if (!avg_[t]) {
            continue;
        }
        double w = 1.0;
        if (instances[k] != 0) {
            const std::int64_t size = sizes[instances[k]];
            if (size <= 0) {
                throw std::logic_error("iIoU: empty instance");
            }
            w = *avg_[t] / static_cast<double>(size);
        }
        if (p == t) {
            itp_[t] += w;
        } else {
            ifn_[t] += w;
        }
    }
}

void InstanceIoU::merge(const InstanceIoU& other) {
    if (other.itp_.size() != itp_.size()) {
        throw std::invalid_argument("iIoU merge: class counts differ");
    }
    for (std::size_t c = 0; c < itp_.size(); ++c) {
        itp_[c] += other.itp_[c];
        ifn_[c] += other.ifn_[c];
        fp_[c] += other.fp_[c];
    }
}

ClassScores InstanceIoU::scores() const {
    ClassScores out;
    for (std::size_t c = 0; c < itp_.size(); ++c) {
        const double denom = itp_[c] + static_cast<double>(fp_[c]) + ifn_[c];
        if (!avg_[c] || denom <= 0.0) {
            out.per_class.emplace_back(std::nullopt);
        } else {
            out.per_class.emplace_back(itp_[c] / denom);
        }
    }
    out.mean = mean_of(out.per_class);
    return out;
}

void CategoryMap::validate(int num_classes) const {
    if (static_cast<int>(category_of.size()) != num_classes) {
        throw std::invalid_argument("category map covers " + std::to_string(category_of.size()) + " classes, need " +
                                    std::to_string(num_classes));
    }
    std::vector<bool> hit(names.size(), false);
    for (int cat : category_of) {
        if (cat < 0 || cat >= num_categories()) {
            throw std::invalid_argument("category map: category id " + std::to_string(cat) + " has no name");
        }
        hit[cat] = true;
    }
    if (std::find(hit.begin(), hit.end(), false) != hit.end()) {
        throw std::invalid_argument("category map: every category needs at least one class");
    }
}

std::vector<int> CategoryMap::apply(std::span<const int> classes, int ignore_label) const {
    std::vector<int> out(classes.size());
    for (std::size_t k = 0; k < classes.size(); ++k) {
        const int c = classes[k];
        if (c == ignore_label) {
            out[k] = ignore_label;
        } else if (c < 0 || c >= static_cast<int>(category_of.size())) {
            throw std::invalid_argument("category map: class id " + std::to_string(c) + " out of range");
        } else {
            out[k] = category_of[c];
        }
    }
    return out;
}

CategoryMap CategoryMap::identity(int num_classes) {
    CategoryMap m;
    for (int c = 0; c < num_classes; ++c) {
        m.category_of.push_back(c);
        m.names.push_back("class" + std::to_string(c));
    }
    return m;
}

CategoryMap CategoryMap::synthetic(int num_classes) {
    CategoryMap m;
    m.names = {"background"};
    m.category_of = {0};
    if (num_classes > 1) {
        m.names.emplace_back("object");
        m.category_of.resize(static_cast<std::size_t>(num_classes), 1);
    }
    return m;
}

namespace {

struct LevelScores {
    ClassScores iou;
    ClassScores iiou;
    ConfusionMatrix confusion;
};

LevelScores score_level(std::span<const EvalSample> samples, int num_classes, const CategoryMap* categories,
                        int ignore_label) {
    auto mapped = [&](const std::vector<int>& v) {
        return categories != nullptr ? categories->apply(v, ignore_label) : v;
    };
    InstanceSizes sizes(num_classes);
    for (const EvalSample& s : samples) {
        sizes.accumulate(mapped(s.truth), s.instances, ignore_label);
    }
    ConfusionMatrix cm(num_classes);
    InstanceIoU inst(sizes);
    for (const EvalSample& s : samples) {
        const std::vector<int> pred = mapped(s.pred);
        const std::vector<int> truth = mapped(s.truth);
        cm.accumulate(pred, truth, ignore_label);
        inst.accumulate(pred, truth, s.instances, ignore_label);
    }
    return {iou(cm), inst.scores(), cm};
}

nlohmann::ordered_json scores_json(const std::vector<std::optional<double>>& v) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& x : v) {
        arr.push_back(x ? nlohmann::ordered_json(*x) : nlohmann::ordered_json(nullptr));
    }
    return arr;
}

nlohmann::ordered_json opt_json(const std::optional<double>& x) {
    return x ? nlohmann::ordered_json(*x) : nlohmann::ordered_json(nullptr);
}

}  // namespace

MetricsReport evaluate_samples(std::span<const EvalSample> samples, int num_classes, const CategoryMap& categories,
                               int ignore_label) {
    categories.validate(num_classes);
    MetricsReport report;
    LevelScores cls = score_level(samples, num_classes, nullptr, ignore_label);
    LevelScores cat = score_level(samples, categories.num_categories(), &categories, ignore_label);
    report.class_iou = cls.iou;
    report.class_iiou = cls.iiou;
    report.category_iou = cat.iou;
    report.category_iiou = cat.iiou;
    report.confusion = cls.confusion;
    report.ignored_pixels = cls.confusion.ignored();
    for (int t = 0; t < num_classes; ++t) {
        std::int64_t n = 0;
        for (int p = 0; p < num_classes; ++p) {
            n += cls.confusion.at(t, p);
        }
        report.truth_pixels.push_back(n);
    }
    return report;
}

nlohmann::ordered_json MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["per_class_iou"] = scores_json(class_iou.per_class);
    j["mean_iou"] = opt_json(class_iou.mean);
    j["per_class_iiou"] = scores_json(class_iiou.per_class);
    j["mean_iiou"] = opt_json(class_iiou.mean);
    j["per_category_iou"] = scores_json(category_iou.per_class);
    j["mean_category_iou"] = opt_json(category_iou.mean);
    j["per_category_iiou"] = scores_json(category_iiou.per_class);
    j["mean_category_iiou"] = opt_json(category_iiou.mean);
    j["pixel_counts"] = {{"per_class", truth_pixels}, {"ignored", ignored_pixels}};
    return j;
}

std::vector<int> majority_vote(std::span<const std::vector<int>> votes, int num_classes) {
    if (votes.empty()) {
        throw std::invalid_argument("majority_vote: no votes");
    }
    const std::size_t n = votes.front().size();
    for (const auto& v : votes) {
        if (v.size() != n) {
            throw std::invalid_argument("majority_vote: label maps differ in size");
        }
    }
    std::vector<int> out(n);
    std::vector<int> tally(static_cast<std::size_t>(num_classes));
    for (std::size_t k = 0; k < n; ++k) {
        std::fill(tally.begin(), tally.end(), 0);
        for (const auto& v : votes) {
            if (v[k] < 0 || v[k] >= num_classes) {
                throw std::invalid_argument("majority_vote: class id out of range");
            }
            ++tally[v[k]];
        }
        // max_element returns the first maximum, i.e. the lowest class id.
        out[k] = static_cast<int>(std::max_element(tally.begin(), tally.end()) - tally.begin());
    }
    return out;
}

MultiscaleResult multiscale_predict(GridModel<float>& model, const std::vector<float>& image, int height, int width,
                                    std::span<const double> scales) {
    const GridSpec& spec = model.spec();
    if (image.size() != static_cast<std::size_t>(spec.image_channels) * height * width) {
        throw std::invalid_argument("multiscale_predict: image size does not match " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
    MultiscaleResult result;
    std::vector<std::vector<int>> votes;
    const int min_side = min_input_side(spec);
    for (double s : scales) {
        const int h = static_cast<int>(std::lround(height * s));
        const int w = static_cast<int>(std::lround(width * s));
        if (h < min_side || w < min_side) {
            result.warnings.push_back("scale " + std::to_string(s) + " gives " + std::to_string(h) + "x" +
                                      std::to_string(w) + ", below minimum side " + std::to_string(min_side) +
                                      "; skipped");
            continue;
        }
        std::vector<float> resized =
            (h == height && w == width) ? image : resize_bilinear(image, spec.image_channels, height, width, h, w);
        const Tensor<float> x(Shape{1, spec.image_channels, h, w}, std::move(resized));
        const ForwardResult<float> out = forward(model, x, Mode::Eval);
        std::vector<int> labels = argmax_channels(out.logits);
        if (h != height || w != width) {
            labels = resize_nearest(labels, h, w, height, width);
        }
        votes.push_back(std::move(labels));
        result.used_scales.push_back(s);
    }
    if (votes.empty()) {
        throw std::invalid_argument("multiscale_predict: every scale is below the minimum input side");
    }
    result.labels = votes.size() == 1 ? std::move(votes.front()) : majority_vote(votes, spec.num_classes);
    return result;
}

}  // namespace gridnet
