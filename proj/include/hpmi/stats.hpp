#pragma once

#include <vector>

namespace hpmi {

// Inverse standard-normal CDF (Acklam's rational approximation, |err| < 1.2e-9).
double standard_normal_quantile(double p);

double median(std::vector<double> values);

// Shannon entropy of a probability vector, natural log.
double shannon_entropy(const std::vector<double>& probs);

}  // namespace hpmi
