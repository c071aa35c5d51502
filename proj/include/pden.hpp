#ifndef PDEN_HPP
#define PDEN_HPP

#include "pden/tensor.hpp"
#include "pden/rng.hpp"
#include "pden/autodiff.hpp"
#include "pden/optim.hpp"
#include "pden/gradcheck.hpp"
#include "pden/layers.hpp"
#include "pden/models.hpp"
#include "pden/checkpoint.hpp"
#include "pden/losses.hpp"
#include "pden/dataset.hpp"
#include "pden/idx.hpp"
#include "pden/toy.hpp"
#include "pden/shifts.hpp"
#include "pden/evaluate.hpp"
#include "pden/pipeline.hpp"
#include "pden/harness.hpp"
#include "pden/gradcheck_suite.hpp"
#include "pden/config.hpp"
#include "pden/runner.hpp"

#endif  // PDEN_HPP
