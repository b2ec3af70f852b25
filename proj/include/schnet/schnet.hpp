#pragma once

#include "schnet/checkpoint.hpp"
#include "schnet/config.hpp"
#include "schnet/data.hpp"
#include "schnet/encoders.hpp"
#include "schnet/errors.hpp"
#include "schnet/ftm.hpp"
#include "schnet/gradcheck.hpp"
#include "schnet/head.hpp"
#include "schnet/metrics.hpp"
#include "schnet/model.hpp"
#include "schnet/optim.hpp"
#include "schnet/rng.hpp"
#include "schnet/serialize.hpp"
#include "schnet/sim.hpp"
#include "schnet/srm.hpp"
#include "schnet/tensor.hpp"
#include "schnet/tta.hpp"
#include "schnet/trainer.hpp"
