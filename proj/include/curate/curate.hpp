#ifndef CURATE_CURATE_HPP
#define CURATE_CURATE_HPP

#include "curate/annotation_service.hpp"
#include "curate/caption_client.hpp"
#include "curate/core.hpp"
#include "curate/dedup.hpp"
#include "curate/estimator.hpp"
#include "curate/eval_stats.hpp"
#include "curate/metrics.hpp"
#include "curate/pipeline.hpp"
#include "curate/selector.hpp"
#include "curate/stage_engine.hpp"
#include "curate/synthetic.hpp"

#endif  // CURATE_CURATE_HPP
