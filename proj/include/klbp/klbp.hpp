#pragma once

#include "klbp/error.hpp"
#include "klbp/dist.hpp"
#include "klbp/projection.hpp"
#include "klbp/factor_graph.hpp"
#include "klbp/lift.hpp"
#include "klbp/comp_graph.hpp"
#include "klbp/spn.hpp"
#include "klbp/spn_fg.hpp"
#include "klbp/lipschitz.hpp"
#include "klbp/posterior.hpp"
#include "klbp/oracle.hpp"
#include "klbp/io.hpp"
#include "klbp/random.hpp"
#include "klbp/verify.hpp"
