#pragma once

#include <string>

namespace faceaug {

struct PlotResult {
    std::string image_path;
    std::string csv_path;
};

// Renders the curve a CSV describes and re-emits the plotted columns as a
// tidy CSV next to it. Two input headers are understood: a training run log
// (`step,epoch,gen_loss,disc_loss,...`) becomes a loss-curve image plus
// `step,gen_loss,disc_loss`; a verification report (`threshold,accuracy`)
// becomes an accuracy-curve image plus a passthrough of the same columns.
// Unknown headers, malformed rows (reported with their row number), and
// header-only inputs are ConfigErrors.
PlotResult plot(const std::string& input_csv, const std::string& out_dir);

}  // namespace faceaug
