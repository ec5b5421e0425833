#pragma once

#include "saehd/diagnostics.hpp"
#include "saehd/fit_gee.hpp"
#include "saehd/fit_mle.hpp"
#include "saehd/influence.hpp"
#include "saehd/io.hpp"
#include "saehd/model.hpp"
#include "saehd/mq.hpp"
#include "saehd/pipeline.hpp"
#include "saehd/predict.hpp"
#include "saehd/sim.hpp"
#include "saehd/uncertainty.hpp"
