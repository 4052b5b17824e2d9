#pragma once

#include "plnd/atlas.hpp"
#include "plnd/corpus.hpp"
#include "plnd/errors.hpp"
#include "plnd/importance.hpp"
#include "plnd/io.hpp"
#include "plnd/matrix.hpp"
#include "plnd/model.hpp"
#include "plnd/parallel.hpp"
#include "plnd/rng.hpp"
#include "plnd/tuner.hpp"
#include "plnd/weight_io.hpp"
#include "plnd/workflow.hpp"
