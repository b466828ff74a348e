#pragma once

#include "hetpref/aggregate.hpp"
#include "hetpref/choice.hpp"
#include "hetpref/core.hpp"
#include "hetpref/data_gen.hpp"
#include "hetpref/dpo.hpp"
#include "hetpref/em.hpp"
#include "hetpref/identify.hpp"
#include "hetpref/kmeans.hpp"
#include "hetpref/metrics.hpp"
#include "hetpref/random.hpp"
