#pragma once

#include "fedul/baselines.hpp"
#include "fedul/config.hpp"
#include "fedul/datagen.hpp"
#include "fedul/error.hpp"
#include "fedul/experiment.hpp"
#include "fedul/federation.hpp"
#include "fedul/idx.hpp"
#include "fedul/linalg.hpp"
#include "fedul/matrix.hpp"
#include "fedul/nn.hpp"
#include "fedul/priors.hpp"
#include "fedul/random.hpp"
#include "fedul/training.hpp"
#include "fedul/transition.hpp"
#include "fedul/oracle.hpp"
