#pragma once

#include <string>
#include <vector>

namespace panelglmm {

struct DiagnosticEvent {
  std::string code;
  std::string message;
};

// Collects non-fatal events (eta clipping, dropped columns, optimizer warnings).
// Operations accept a nullable pointer; passing nullptr discards the events.
class Diagnostics {
 public:
  void warn(std::string code, std::string message) {
    events_.push_back({std::move(code), std::move(message)});
  }
  const std::vector<DiagnosticEvent>& events() const noexcept { return events_; }
  std::size_t count(const std::string& code) const {
    std::size_t c = 0;
    for (const auto& e : events_) c += (e.code == code);
    return c;
  }
  bool empty() const noexcept { return events_.empty(); }
  void clear() noexcept { events_.clear(); }

 private:
  std::vector<DiagnosticEvent> events_;
};

inline void warn(Diagnostics* diag, std::string code, std::string message) {
  if (diag != nullptr) diag->warn(std::move(code), std::move(message));
}

}  // namespace panelglmm
