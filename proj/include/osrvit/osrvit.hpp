#pragma once

#include "osrvit/checkpoint.hpp"
#include "osrvit/data.hpp"
#include "osrvit/errors.hpp"
#include "osrvit/evaluation.hpp"
#include "osrvit/ops.hpp"
#include "osrvit/osr.hpp"
#include "osrvit/pipeline.hpp"
#include "osrvit/prefetch.hpp"
#include "osrvit/random.hpp"
#include "osrvit/tensor.hpp"
#include "osrvit/training.hpp"
#include "osrvit/vit.hpp"
