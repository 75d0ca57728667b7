#pragma once

#include "crossret/errors.hpp"
#include "crossret/rng.hpp"
#include "crossret/autodiff.hpp"
#include "crossret/data_corpus.hpp"
#include "crossret/segment_filter.hpp"
#include "crossret/encoders.hpp"
#include "crossret/checkpoint.hpp"
#include "crossret/optimizer.hpp"
#include "crossret/eval.hpp"
#include "crossret/pretrain.hpp"
#include "crossret/acss.hpp"
#include "crossret/adversary.hpp"
#include "crossret/geotag_analysis.hpp"
#include "crossret/config.hpp"
#include "crossret/cli.hpp"
