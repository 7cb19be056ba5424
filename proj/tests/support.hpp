#pragma once

#include "gridguard/harness.hpp"

#include <string>

namespace testing_support {

inline std::string fixture(const std::string& name) { return std::string(GRIDGUARD_FIXTURE_DIR) + "/" + name; }

inline gridguard::NetworkCase case2() { return gridguard::load_case(fixture("case2.m")); }
inline gridguard::NetworkCase case3() { return gridguard::load_case(fixture("case3.m")); }
inline gridguard::NetworkCase case3_vlow() { return gridguard::load_case(fixture("case3_vlow.m")); }

/// Stage-1 solution at base demand, packaged for Stage 2/3.
inline gridguard::HourData base_hour(const gridguard::NetworkCase& c) {
    gridguard::Demand d = gridguard::base_demand(c);
    gridguard::DispatchSlice x = gridguard::solve_stage1(c, d);
    return {0, d, x};
}

}  // namespace testing_support
