#pragma once

#include "hdu/train/augment.hpp"
#include "hdu/train/models.hpp"
#include "hdu/train/optimizer.hpp"
#include "hdu/train/schedule.hpp"
#include "hdu/train/trainer.hpp"
