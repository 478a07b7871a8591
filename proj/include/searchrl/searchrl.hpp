#pragma once

// Everything except the HTTP adapters (include searchrl/http.hpp for those).

#include "searchrl/common.hpp"
#include "searchrl/tag_protocol.hpp"
#include "searchrl/retrieval.hpp"
#include "searchrl/policy.hpp"
#include "searchrl/prompts.hpp"
#include "searchrl/episode.hpp"
#include "searchrl/rewards.hpp"
#include "searchrl/rollout.hpp"
#include "searchrl/toy_policy.hpp"
#include "searchrl/trainer.hpp"
#include "searchrl/checkpoint.hpp"
#include "searchrl/synthetic.hpp"
#include "searchrl/data_pipeline.hpp"
#include "searchrl/eval.hpp"
#include "searchrl/desk.hpp"
