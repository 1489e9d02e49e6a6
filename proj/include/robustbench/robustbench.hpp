#pragma once

#include "robustbench/attacks.hpp"
#include "robustbench/autodiff.hpp"
#include "robustbench/checkpoint.hpp"
#include "robustbench/config.hpp"
#include "robustbench/datasets.hpp"
#include "robustbench/evaluation.hpp"
#include "robustbench/experiment.hpp"
#include "robustbench/io.hpp"
#include "robustbench/models.hpp"
#include "robustbench/quantization.hpp"
#include "robustbench/random.hpp"
#include "robustbench/tensor.hpp"
#include "robustbench/training.hpp"
