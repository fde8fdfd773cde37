#pragma once

#include "imtl/dataset.hpp"
#include "imtl/error.hpp"
#include "imtl/experiment.hpp"
#include "imtl/fit_options.hpp"
#include "imtl/hocpd.hpp"
#include "imtl/identifiability.hpp"
#include "imtl/io.hpp"
#include "imtl/logistic.hpp"
#include "imtl/multilayer.hpp"
#include "imtl/random.hpp"
#include "imtl/simulate.hpp"
#include "imtl/storage.hpp"
#include "imtl/tensor.hpp"
