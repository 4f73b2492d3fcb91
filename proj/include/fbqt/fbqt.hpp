#pragma once

#include "fbqt/error.hpp"
#include "fbqt/random.hpp"
#include "fbqt/state_space.hpp"
#include "fbqt/params.hpp"
#include "fbqt/dynamics.hpp"
#include "fbqt/records.hpp"
#include "fbqt/ensemble.hpp"
#include "fbqt/interferometry.hpp"
#include "fbqt/oracle.hpp"
#include "fbqt/experiment.hpp"
