#pragma once

#include "clops/command.hpp"
#include "clops/commnet.hpp"
#include "clops/control.hpp"
#include "clops/cosim.hpp"
#include "clops/csv.hpp"
#include "clops/error.hpp"
#include "clops/geo.hpp"
#include "clops/hils.hpp"
#include "clops/mobility.hpp"
#include "clops/netgraph.hpp"
#include "clops/osm.hpp"
#include "clops/partitioner.hpp"
#include "clops/rng.hpp"
#include "clops/scenario.hpp"
#include "clops/signals.hpp"
