#pragma once

#include "xpool/checkpoint.hpp"
#include "xpool/contrastive.hpp"
#include "xpool/corpus.hpp"
#include "xpool/errors.hpp"
#include "xpool/gradcheck.hpp"
#include "xpool/matrix.hpp"
#include "xpool/objective.hpp"
#include "xpool/ops.hpp"
#include "xpool/pooling.hpp"
#include "xpool/retrieval.hpp"
#include "xpool/synthetic.hpp"
#include "xpool/trainer.hpp"
