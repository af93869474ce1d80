#pragma once

#include "moc/attention.hpp"
#include "moc/autodiff.hpp"
#include "moc/bench.hpp"
#include "moc/checkpoint.hpp"
#include "moc/config.hpp"
#include "moc/core.hpp"
#include "moc/flow.hpp"
#include "moc/gradcheck.hpp"
#include "moc/local_block.hpp"
#include "moc/model.hpp"
#include "moc/moc_attention.hpp"
#include "moc/optim.hpp"
#include "moc/router.hpp"
#include "moc/run.hpp"
#include "moc/synth.hpp"
#include "moc/tokens.hpp"
