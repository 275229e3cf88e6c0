#pragma once

#include "patchkernel/analysis.hpp"
#include "patchkernel/classifier.hpp"
#include "patchkernel/config.hpp"
#include "patchkernel/dataset.hpp"
#include "patchkernel/dictionary.hpp"
#include "patchkernel/encoder.hpp"
#include "patchkernel/error.hpp"
#include "patchkernel/feature_cache.hpp"
#include "patchkernel/linalg.hpp"
#include "patchkernel/pipeline.hpp"
#include "patchkernel/training.hpp"
#include "patchkernel/whitening.hpp"
