#pragma once

#include "omni/autodiff.hpp"
#include "omni/caption.hpp"
#include "omni/denoiser.hpp"
#include "omni/errors.hpp"
#include "omni/fusion.hpp"
#include "omni/gradcheck.hpp"
#include "omni/layers.hpp"
#include "omni/optim.hpp"
#include "omni/params.hpp"
#include "omni/positions.hpp"
#include "omni/rope.hpp"
#include "omni/schedule.hpp"
#include "omni/speech_gate.hpp"
#include "omni/tensor.hpp"
#include "omni/toy.hpp"
#include "omni/verification.hpp"
