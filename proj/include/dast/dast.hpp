#pragma once

// Umbrella header.

#include "dast/baselines.hpp"
#include "dast/covariance.hpp"
#include "dast/data.hpp"
#include "dast/glm.hpp"
#include "dast/impact.hpp"
#include "dast/inference.hpp"
#include "dast/io.hpp"
#include "dast/likelihood.hpp"
#include "dast/model.hpp"
#include "dast/optim.hpp"
#include "dast/parallel.hpp"
#include "dast/predict.hpp"
#include "dast/rng.hpp"
#include "dast/serialize.hpp"
#include "dast/simstudy.hpp"
#include "dast/validate.hpp"
