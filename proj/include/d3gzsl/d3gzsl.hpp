#pragma once

#include "d3gzsl/checkpoint.hpp"
#include "d3gzsl/config.hpp"
#include "d3gzsl/data.hpp"
#include "d3gzsl/error.hpp"
#include "d3gzsl/experiment.hpp"
#include "d3gzsl/feature_gen.hpp"
#include "d3gzsl/id2sd.hpp"
#include "d3gzsl/metrics.hpp"
#include "d3gzsl/nn.hpp"
#include "d3gzsl/o2dbd.hpp"
#include "d3gzsl/pipeline.hpp"
#include "d3gzsl/rng.hpp"
#include "d3gzsl/tensor.hpp"
