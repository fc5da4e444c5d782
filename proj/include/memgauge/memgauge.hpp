#pragma once

#include "analysis.hpp"
#include "binary_io.hpp"
#include "cifar10.hpp"
#include "compression.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "influence.hpp"
#include "matrix.hpp"
#include "model.hpp"
#include "seeding.hpp"
#include "special_functions.hpp"
#include "train.hpp"
#include "serialization.hpp"
