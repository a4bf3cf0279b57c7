#ifndef ICNN_ICNN_HPP
#define ICNN_ICNN_HPP

#include "icnn/common.hpp"
#include "icnn/tensor.hpp"
#include "icnn/network.hpp"
#include "icnn/imaging.hpp"
#include "icnn/synth.hpp"
#include "icnn/sampling.hpp"
#include "icnn/training.hpp"
#include "icnn/inference.hpp"
#include "icnn/refine.hpp"
#include "icnn/metrics.hpp"

#endif  // ICNN_ICNN_HPP
