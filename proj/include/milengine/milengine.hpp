#pragma once

// Umbrella header for the whole engine.

#include "milengine/aggregators/model.hpp"
#include "milengine/aggregators/model_io.hpp"
#include "milengine/data/bag.hpp"
#include "milengine/data/folds.hpp"
#include "milengine/data/manifest.hpp"
#include "milengine/data/synth.hpp"
#include "milengine/errors.hpp"
#include "milengine/nn/grad_check.hpp"
#include "milengine/nn/loss.hpp"
#include "milengine/nn/optim.hpp"
#include "milengine/nn/tape.hpp"
#include "milengine/preprocess/raster.hpp"
#include "milengine/preprocess/tiling.hpp"
#include "milengine/random.hpp"
#include "milengine/train_eval/cv.hpp"
#include "milengine/train_eval/report.hpp"
#include "milengine/train_eval/train.hpp"
#include "milengine/tsne/tsne.hpp"
#include "milengine/version.hpp"
