#pragma once

#include "gfml/coalition.hpp"
#include "gfml/config.hpp"
#include "gfml/costmodel.hpp"
#include "gfml/datasets.hpp"
#include "gfml/error.hpp"
#include "gfml/ledger.hpp"
#include "gfml/metalearner.hpp"
#include "gfml/model.hpp"
#include "gfml/orchestrator.hpp"
#include "gfml/reputation.hpp"
#include "gfml/rng.hpp"
#include "gfml/stackelberg.hpp"
#include "gfml/utility.hpp"
