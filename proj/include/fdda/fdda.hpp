// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_FDDA_HPP
#define FDDA_FDDA_HPP

#include "fdda/archive.hpp"
#include "fdda/bns.hpp"
#include "fdda/cluster.hpp"
#include "fdda/config.hpp"
#include "fdda/dataset.hpp"
#include "fdda/generator.hpp"
#include "fdda/grad_check.hpp"
#include "fdda/network.hpp"
#include "fdda/ops.hpp"
#include "fdda/optim.hpp"
#include "fdda/quantized_model.hpp"
#include "fdda/quantizer.hpp"
#include "fdda/tensor.hpp"
#include "fdda/trainer.hpp"

#endif  // FDDA_FDDA_HPP
