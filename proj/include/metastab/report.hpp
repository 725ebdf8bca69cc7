#pragma once

#include <string>
#include <vector>

namespace metastab {

// One measured predicate: named, pass/fail, with the measured slack or
// constant so reports stay useful when a check trips.
struct check_item {
  std::string name;
  bool pass = false;
  double measured = 0.0;
  std::string note;
};

struct check_report {
  std::vector<check_item> items;

  bool all_pass() const {
    for (const auto& c : items)
      if (!c.pass) return false;
    return true;
  }
  void add(std::string name, bool pass, double measured,
           std::string note = "") {
    items.push_back({std::move(name), pass, measured, std::move(note)});
  }
};

}  // namespace metastab
