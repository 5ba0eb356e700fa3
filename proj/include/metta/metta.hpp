#pragma once

#include "metta/analysis.hpp"
#include "metta/augment.hpp"
#include "metta/autodiff.hpp"
#include "metta/binary_io.hpp"
#include "metta/config.hpp"
#include "metta/core.hpp"
#include "metta/dataset.hpp"
#include "metta/errors.hpp"
#include "metta/gradcheck.hpp"
#include "metta/model.hpp"
#include "metta/ops.hpp"
#include "metta/optim.hpp"
#include "metta/parallel.hpp"
#include "metta/pipeline.hpp"
#include "metta/properties.hpp"
#include "metta/rng.hpp"
#include "metta/tensor.hpp"
