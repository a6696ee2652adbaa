#pragma once

#include "insider/error.hpp"
#include "insider/noise.hpp"
#include "insider/linalg.hpp"
#include "insider/montecarlo.hpp"
#include "insider/donsker.hpp"
#include "insider/spde.hpp"
#include "insider/hamiltonian.hpp"
#include "insider/portfolio.hpp"
#include "insider/zakai.hpp"
