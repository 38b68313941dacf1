#pragma once

#include "mianet/autodiff.hpp"
#include "mianet/checkpoint.hpp"
#include "mianet/commands.hpp"
#include "mianet/dataset_io.hpp"
#include "mianet/episodes.hpp"
#include "mianet/gim.hpp"
#include "mianet/hpm.hpp"
#include "mianet/ifm.hpp"
#include "mianet/model.hpp"
#include "mianet/protocol.hpp"
#include "mianet/random.hpp"
#include "mianet/run_config.hpp"
#include "mianet/tensor.hpp"
#include "mianet/tensor_io.hpp"
#include "mianet/train.hpp"
