#pragma once

#include "crossed_lmm/bandit.hpp"
#include "crossed_lmm/dataset.hpp"
#include "crossed_lmm/dense_oracle.hpp"
#include "crossed_lmm/em.hpp"
#include "crossed_lmm/error.hpp"
#include "crossed_lmm/harness.hpp"
#include "crossed_lmm/model.hpp"
#include "crossed_lmm/rng.hpp"
#include "crossed_lmm/simenv.hpp"
#include "crossed_lmm/solver.hpp"
#include "crossed_lmm/trial_log.hpp"
