#pragma once

#include "vseg/augmentation.hpp"
#include "vseg/autodiff.hpp"
#include "vseg/checkpoint.hpp"
#include "vseg/dataset.hpp"
#include "vseg/error.hpp"
#include "vseg/evaluation.hpp"
#include "vseg/image.hpp"
#include "vseg/inference.hpp"
#include "vseg/layers.hpp"
#include "vseg/losses.hpp"
#include "vseg/metrics.hpp"
#include "vseg/network.hpp"
#include "vseg/optimizer.hpp"
#include "vseg/pgm.hpp"
#include "vseg/phantom.hpp"
#include "vseg/postprocess.hpp"
#include "vseg/seed.hpp"
#include "vseg/tensor.hpp"
#include "vseg/trainer.hpp"
