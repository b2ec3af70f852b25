#pragma once

// Confusion-matrix segmentation metrics: pixAcc = trace/total, meanAcc =
// mean per-class recall over classes present in the ground truth, IoU_k =
// TP/(TP+FP+FN), mIoU over classes present in GT union prediction (classes
// absent from both are excluded by default; a flag counts them as 1.0 for
// cross-checking).

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "schnet/data.hpp"
#include "schnet/errors.hpp"

namespace schnet {

struct MetricsReport {
    std::size_t num_classes = 0;
    std::vector<std::int64_t> confusion;  // K x K, rows = gt, cols = pred
    std::vector<double> per_class_iou;    // -1 where undefined (absent everywhere)
    double miou = 0.0;
    double pix_acc = 0.0;
    double mean_acc = 0.0;
};

inline void accumulate_confusion(std::vector<std::int64_t>& confusion, std::size_t k,
                                 const std::vector<std::uint8_t>& pred,
                                 const std::vector<std::uint8_t>& gt) {
    if (pred.size() != gt.size()) throw DataError("confusion: pred/gt sizes differ");
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const std::uint8_t g = gt[i];
        if (g == kIgnoreLabel) continue;
        if (g >= k) throw DataError("confusion: gt id " + std::to_string(g) + " >= K");
        if (pred[i] >= k) throw DataError("confusion: pred id " + std::to_string(pred[i]) + " >= K");
        ++confusion[g * k + pred[i]];
    }
}

inline MetricsReport finalize_metrics(std::vector<std::int64_t> confusion, std::size_t k,
                                      bool include_absent_as_one = false) {
    MetricsReport r;
    r.num_classes = k;
    std::int64_t total = 0, correct = 0;
    std::vector<std::int64_t> row_sum(k, 0), col_sum(k, 0);
    for (std::size_t g = 0; g < k; ++g)
        for (std::size_t p = 0; p < k; ++p) {
            const std::int64_t v = confusion[g * k + p];
            total += v;
            row_sum[g] += v;
            col_sum[p] += v;
            if (g == p) correct += v;
        }
    r.pix_acc = total ? static_cast<double>(correct) / total : 0.0;

    double acc_sum = 0.0;
    std::size_t acc_cnt = 0;
    double iou_sum = 0.0;
    std::size_t iou_cnt = 0;
    r.per_class_iou.assign(k, -1.0);
    for (std::size_t c = 0; c < k; ++c) {
        const std::int64_t tp = confusion[c * k + c];
        if (row_sum[c] > 0) {
            acc_sum += static_cast<double>(tp) / row_sum[c];
            ++acc_cnt;
        }
        const std::int64_t uni = row_sum[c] + col_sum[c] - tp;
        if (uni > 0) {
            r.per_class_iou[c] = static_cast<double>(tp) / uni;
            iou_sum += r.per_class_iou[c];
            ++iou_cnt;
        } else if (include_absent_as_one) {
            r.per_class_iou[c] = 1.0;
            iou_sum += 1.0;
            ++iou_cnt;
        }
    }
    r.mean_acc = acc_cnt ? acc_sum / acc_cnt : 0.0;
    r.miou = iou_cnt ? iou_sum / iou_cnt : 0.0;
    r.confusion = std::move(confusion);
    return r;
}

inline MetricsReport compute_metrics(const std::vector<std::uint8_t>& pred,
                                     const std::vector<std::uint8_t>& gt, std::size_t k,
                                     bool include_absent_as_one = false) {
    std::vector<std::int64_t> confusion(k * k, 0);
    accumulate_confusion(confusion, k, pred, gt);
    return finalize_metrics(std::move(confusion), k, include_absent_as_one);
}

// Per-class table with background moved last (the usual per-class IoU table
// layout), then the averages.
inline std::string format_report(const MetricsReport& r,
                                 const std::vector<std::string>& class_names) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    auto name = [&](std::size_t c) {
        return c < class_names.size() ? class_names[c] : ("class" + std::to_string(c));
    };
    std::vector<std::size_t> order;
    for (std::size_t c = 1; c < r.num_classes; ++c) order.push_back(c);
    order.push_back(0);
    os << "per-class IoU:\n";
    for (std::size_t c : order) {
        os << "  " << std::setw(12) << name(c) << "  ";
        if (r.per_class_iou[c] < 0)
            os << "   n/a";
        else
            os << r.per_class_iou[c];
        os << "\n";
    }
    os << "pixAcc " << r.pix_acc << "  meanAcc " << r.mean_acc << "  mIoU " << r.miou << "\n";
    return os.str();
}

// Machine-readable key=value block.
inline std::string report_kv(const MetricsReport& r,
                             const std::vector<std::string>& class_names) {
    std::ostringstream os;
    os << std::setprecision(10);
    auto name = [&](std::size_t c) {
        return c < class_names.size() ? class_names[c] : ("class" + std::to_string(c));
    };
    os << "pix_acc = " << r.pix_acc << "\n";
    os << "mean_acc = " << r.mean_acc << "\n";
    os << "miou = " << r.miou << "\n";
    for (std::size_t c = 0; c < r.num_classes; ++c)
        os << "iou." << name(c) << " = " << r.per_class_iou[c] << "\n";
    return os.str();
}

}  // namespace schnet
