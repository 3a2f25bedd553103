#pragma once

// Umbrella header.

#include "proto_ood/data.hpp"
#include "proto_ood/dump.hpp"
#include "proto_ood/errors.hpp"
#include "proto_ood/evaluator.hpp"
#include "proto_ood/losses.hpp"
#include "proto_ood/matrix.hpp"
#include "proto_ood/mlp.hpp"
#include "proto_ood/proto_head.hpp"
#include "proto_ood/rng.hpp"
#include "proto_ood/trainer.hpp"
#include "proto_ood/util.hpp"
