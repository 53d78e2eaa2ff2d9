#pragma once

#include "iea/analysis.hpp"
#include "iea/checkpoint.hpp"
#include "iea/data.hpp"
#include "iea/errors.hpp"
#include "iea/layers.hpp"
#include "iea/model.hpp"
#include "iea/tensor.hpp"
#include "iea/train.hpp"
