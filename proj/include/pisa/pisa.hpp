#pragma once

// Piecewise sparse attention on CPU: exact attention over routed key/value
// blocks fused with block-wise Taylor approximation of the remaining blocks
// inside one softmax normalization, plus the error-bound and FLOP-accounting
// machinery around it.

#include "pisa/analysis.hpp"
#include "pisa/attention.hpp"
#include "pisa/block_stats.hpp"
#include "pisa/bundle.hpp"
#include "pisa/engine.hpp"
#include "pisa/errors.hpp"
#include "pisa/generate.hpp"
#include "pisa/io.hpp"
#include "pisa/matrix.hpp"
#include "pisa/parallel.hpp"
#include "pisa/rng.hpp"
#include "pisa/router.hpp"
