#ifndef QKIN_QKIN_HPP
#define QKIN_QKIN_HPP

#include "core.hpp"
#include "dispersion.hpp"
#include "grids.hpp"
#include "spectrum.hpp"
#include "quasifree.hpp"
#include "ode.hpp"
#include "collision_linear.hpp"
#include "collision_uu.hpp"
#include "transport.hpp"
#include "microscopic.hpp"
#include "io.hpp"

#endif // QKIN_QKIN_HPP
