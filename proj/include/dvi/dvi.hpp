// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dvi/backbone.hpp"
#include "dvi/checkpoint.hpp"
#include "dvi/config.hpp"
#include "dvi/corpus.hpp"
#include "dvi/error.hpp"
#include "dvi/harness.hpp"
#include "dvi/heads.hpp"
#include "dvi/linalg.hpp"
#include "dvi/metrics.hpp"
#include "dvi/replay_buffer.hpp"
#include "dvi/rng.hpp"
#include "dvi/spec_engine.hpp"
#include "dvi/trainer.hpp"
