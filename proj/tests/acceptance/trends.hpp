#pragma once

#include <string>

namespace acceptance {

struct TrendOutcome {
    bool pass = false;
    std::string detail;
};

// method ordering at r = 0.8 and Scattered last at r >= 0.3, 3 seeds
TrendOutcome table_trend();
// train ratio 0.9 vs 0.1 at test ratio 0.9, 3 seeds
TrendOutcome sweep_trend();

}  // namespace acceptance
