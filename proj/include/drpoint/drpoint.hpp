#pragma once

#include "drpoint/autodiff.hpp"
#include "drpoint/backbone.hpp"
#include "drpoint/checkpoint.hpp"
#include "drpoint/config.hpp"
#include "drpoint/data.hpp"
#include "drpoint/error.hpp"
#include "drpoint/geometry.hpp"
#include "drpoint/gradcheck.hpp"
#include "drpoint/image_io.hpp"
#include "drpoint/losses.hpp"
#include "drpoint/model.hpp"
#include "drpoint/nn.hpp"
#include "drpoint/parallel.hpp"
#include "drpoint/pretrain.hpp"
#include "drpoint/renderer.hpp"
#include "drpoint/rng.hpp"
#include "drpoint/trainer.hpp"
