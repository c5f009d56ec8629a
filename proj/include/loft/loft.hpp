#pragma once

// Umbrella header for the whole library.

#include "loft/checkpoint.hpp"
#include "loft/common.hpp"
#include "loft/corpus.hpp"
#include "loft/entity.hpp"
#include "loft/eval.hpp"
#include "loft/lora.hpp"
#include "loft/matrix.hpp"
#include "loft/model.hpp"
#include "loft/synthetic.hpp"
#include "loft/tokenizer.hpp"
#include "loft/trainer.hpp"
