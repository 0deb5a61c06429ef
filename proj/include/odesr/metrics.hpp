// CSV emission for training metrics. Every float goes through the same
// 9-significant-digit formatter so two runs of the same seed produce
// byte-identical files.
#pragma once

#include <cstdio>
#include <fstream>
#include <string>

#include "odesr/errors.hpp"

namespace odesr {

inline std::string format_sig9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : out_(path) {
    if (!out_) throw io_error("cannot open metrics file: " + path);
    out_ << "epoch,split,psnr,nfe_mean,nfe_std,lr\n";
  }

  void row(int epoch, const std::string& split, double psnr, double nfe_mean,
           double nfe_std, double lr) {
    out_ << epoch << ',' << split << ',' << format_sig9(psnr) << ','
         << format_sig9(nfe_mean) << ',' << format_sig9(nfe_std) << ','
         << format_sig9(lr) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace odesr
