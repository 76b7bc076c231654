#pragma once

#include "feri/errors.hpp"
#include "feri/autodiff.hpp"
#include "feri/schema.hpp"
#include "feri/tabmodel.hpp"
#include "feri/optim.hpp"
#include "feri/metrics.hpp"
#include "feri/dataio.hpp"
#include "feri/experiment.hpp"
