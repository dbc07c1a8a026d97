#pragma once

#include "hdu/nn/batchnorm.hpp"
#include "hdu/nn/conv.hpp"
#include "hdu/nn/geometry.hpp"
#include "hdu/nn/loss.hpp"
#include "hdu/nn/pool.hpp"
#include "hdu/nn/softmax.hpp"
#include "hdu/nn/upsample.hpp"
