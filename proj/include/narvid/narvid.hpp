#pragma once

#include "narvid/error.hpp"
#include "narvid/rng.hpp"
#include "narvid/matrix.hpp"
#include "narvid/tensor.hpp"
#include "narvid/gradcheck.hpp"
#include "narvid/dataio.hpp"
#include "narvid/model.hpp"
#include "narvid/filtering.hpp"
#include "narvid/matching.hpp"
#include "narvid/objective.hpp"
#include "narvid/inference.hpp"
#include "narvid/synthlab.hpp"
