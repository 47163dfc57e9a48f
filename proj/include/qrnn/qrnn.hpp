#pragma once

// Core numerics
#include "qrnn/activations.hpp"
#include "qrnn/matrix.hpp"
#include "qrnn/rng.hpp"

// Weight rounding and storage
#include "qrnn/packed.hpp"
#include "qrnn/quantize.hpp"

// Recurrent cells and training
#include "qrnn/cells.hpp"
#include "qrnn/checkpoint.hpp"
#include "qrnn/data.hpp"
#include "qrnn/train.hpp"

// Hidden-state stability analysis
#include "qrnn/diagnostics.hpp"
