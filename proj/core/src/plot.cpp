#include "faceaug/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "faceaug/errors.hpp"
#include "faceaug/train.hpp"

namespace faceaug {

namespace {

namespace fs = std::filesystem;

struct Series {
    std::string label;
    cv::Scalar color;  // BGR
    std::vector<double> x, y;
};

constexpr int kWidth = 960;
constexpr int kHeight = 600;
constexpr int kMarginLeft = 80;
constexpr int kMarginRight = 30;
constexpr int kMarginTop = 40;
constexpr int kMarginBottom = 60;

void render(const std::vector<Series>& series, const std::string& x_label,
            const std::string& y_label, const std::string& title, const std::string& path) {
    double x_lo = series[0].x.front(), x_hi = x_lo;
    double y_lo = series[0].y.front(), y_hi = y_lo;
    for (const Series& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            x_lo = std::min(x_lo, s.x[i]);
            x_hi = std::max(x_hi, s.x[i]);
            y_lo = std::min(y_lo, s.y[i]);
            y_hi = std::max(y_hi, s.y[i]);
        }
    if (x_hi <= x_lo) x_hi = x_lo + 1.0;
    const double pad = (y_hi - y_lo) * 0.08;
    y_lo -= pad > 0.0 ? pad : 0.5;
    y_hi += pad > 0.0 ? pad : 0.5;

    cv::Mat canvas(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
    const int plot_w = kWidth - kMarginLeft - kMarginRight;
    const int plot_h = kHeight - kMarginTop - kMarginBottom;
    auto px = [&](double x) {
        return kMarginLeft + static_cast<int>(std::lround((x - x_lo) / (x_hi - x_lo) * plot_w));
    };
    auto py = [&](double y) {
        return kMarginTop + plot_h -
               static_cast<int>(std::lround((y - y_lo) / (y_hi - y_lo) * plot_h));
    };

    const cv::Scalar axis(60, 60, 60);
    const cv::Scalar grid(225, 225, 225);
    char buf[64];
    for (int tick = 0; tick <= 5; ++tick) {
        const double xv = x_lo + (x_hi - x_lo) * tick / 5.0;
        const double yv = y_lo + (y_hi - y_lo) * tick / 5.0;
        cv::line(canvas, {px(xv), kMarginTop}, {px(xv), kMarginTop + plot_h}, grid, 1);
        cv::line(canvas, {kMarginLeft, py(yv)}, {kMarginLeft + plot_w, py(yv)}, grid, 1);
        std::snprintf(buf, sizeof(buf), "%.4g", xv);
        cv::putText(canvas, buf, {px(xv) - 18, kMarginTop + plot_h + 22},
                    cv::FONT_HERSHEY_SIMPLEX, 0.42, axis, 1, cv::LINE_AA);
        std::snprintf(buf, sizeof(buf), "%.4g", yv);
        cv::putText(canvas, buf, {8, py(yv) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.42, axis, 1,
                    cv::LINE_AA);
    }
    cv::rectangle(canvas, {kMarginLeft, kMarginTop}, {kMarginLeft + plot_w, kMarginTop + plot_h},
                  axis, 1);

    for (const Series& s : series) {
        for (size_t i = 0; i + 1 < s.x.size(); ++i)
            cv::line(canvas, {px(s.x[i]), py(s.y[i])}, {px(s.x[i + 1]), py(s.y[i + 1])}, s.color,
                     2, cv::LINE_AA);
        for (size_t i = 0; i < s.x.size(); ++i)
            cv::circle(canvas, {px(s.x[i]), py(s.y[i])}, 2, s.color, cv::FILLED, cv::LINE_AA);
    }

    int legend_x = kMarginLeft + 14;
    for (const Series& s : series) {
        cv::line(canvas, {legend_x, kMarginTop + 14}, {legend_x + 26, kMarginTop + 14}, s.color, 3);
        cv::putText(canvas, s.label, {legend_x + 32, kMarginTop + 19}, cv::FONT_HERSHEY_SIMPLEX,
                    0.48, axis, 1, cv::LINE_AA);
        legend_x += 40 + 11 * static_cast<int>(s.label.size());
    }
    cv::putText(canvas, title, {kMarginLeft, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.6, axis, 1,
                cv::LINE_AA);
    cv::putText(canvas, x_label, {kMarginLeft + plot_w / 2 - 20, kHeight - 16},
                cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1, cv::LINE_AA);
    cv::putText(canvas, y_label, {10, kMarginTop - 14}, cv::FONT_HERSHEY_SIMPLEX, 0.5, axis, 1,
                cv::LINE_AA);

    if (!cv::imwrite(path, canvas)) throw IoError("cannot write " + path);
}

std::string read_header(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

PlotResult plot_runlog(const std::string& input, const std::string& out_dir) {
    const RunLog log = read_runlog_csv(input);
    if (log.records.empty()) throw ConfigError(input + ": no data rows");
    Series gen{"gen_loss", cv::Scalar(180, 90, 20), {}, {}};
    Series disc{"disc_loss", cv::Scalar(40, 60, 200), {}, {}};
    for (const RunRecord& r : log.records) {
        gen.x.push_back(static_cast<double>(r.step));
        gen.y.push_back(r.gen_loss);
        disc.x.push_back(static_cast<double>(r.step));
        disc.y.push_back(r.disc_loss);
    }

    PlotResult result;
    result.image_path = (fs::path(out_dir) / "loss_curve.png").string();
    result.csv_path = (fs::path(out_dir) / "loss_curve.csv").string();
    render({gen, disc}, "step", "loss", "training loss", result.image_path);
    std::ofstream out(result.csv_path);
    if (!out) throw IoError("cannot write " + result.csv_path);
    out << "step,gen_loss,disc_loss\n";
    char buf[128];
    for (const RunRecord& r : log.records) {
        std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g\n", static_cast<long long>(r.step),
                      r.gen_loss, r.disc_loss);
        out << buf;
    }
    if (!out) throw IoError("failed writing " + result.csv_path);
    return result;
}

PlotResult plot_accuracy(const std::string& input, const std::string& out_dir) {
    std::ifstream in(input);
    if (!in) throw IoError("cannot read " + input);
    std::string line;
    std::getline(in, line);  // header, already validated
    Series acc{"accuracy", cv::Scalar(90, 150, 30), {}, {}};
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        double t = 0.0, a = 0.0;
        char extra = 0;
        if (std::sscanf(line.c_str(), "%lf,%lf%c", &t, &a, &extra) != 2)
            throw ConfigError(input + ":" + std::to_string(lineno) + ": malformed row");
        acc.x.push_back(t);
        acc.y.push_back(a);
    }
    if (acc.x.empty()) throw ConfigError(input + ": no data rows");

    PlotResult result;
    result.image_path = (fs::path(out_dir) / "accuracy_curve.png").string();
    result.csv_path = (fs::path(out_dir) / "accuracy_curve.csv").string();
    render({acc}, "threshold", "accuracy", "verification accuracy", result.image_path);
    std::ofstream out(result.csv_path);
    if (!out) throw IoError("cannot write " + result.csv_path);
    out << "threshold,accuracy\n";
    char buf[96];
    for (size_t i = 0; i < acc.x.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.10g,%.10g\n", acc.x[i], acc.y[i]);
        out << buf;
    }
    if (!out) throw IoError("failed writing " + result.csv_path);
    return result;
}

}  // namespace

PlotResult plot(const std::string& input_csv, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const std::string header = read_header(input_csv);
    if (header == "step,epoch,gen_loss,disc_loss,mse_term,frob_term,adv_term")
        return plot_runlog(input_csv, out_dir);
    if (header == "threshold,accuracy") return plot_accuracy(input_csv, out_dir);
    throw ConfigError(input_csv + ":1: unknown header '" + header + "'");
}

}  // namespace faceaug
