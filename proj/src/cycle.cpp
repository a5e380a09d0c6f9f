#include <algorithm>
#include <cmath>

#include "levda/assimilate.hpp"
#include "levda/errors.hpp"

namespace levda {

std::size_t WindowSpec::observation_count() const {
  std::size_t n = 0;
  for (const auto& b : batches) n += static_cast<std::size_t>(b.values.size());
  return n;
}

void WindowSpec::validate(double time_step) const {
  if (horizon < 0 || span < 0) throw ValidationError("window: horizon and span must be >= 0");
  const double tol = 1e-9 * time_step;
  const double end = anchor + horizon * time_step;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    batches[i].validate();
    if (i > 0 && batches[i].time < batches[i - 1].time) throw ValidationError("window: batches are not sorted");
    if (batches[i].time < anchor - tol || batches[i].time > end + tol) {
      throw ValidationError("window: observation at t=" + std::to_string(batches[i].time) + " outside [" +
                            std::to_string(anchor) + ", " + std::to_string(end) + "]");
    }
  }
}

std::vector<WindowSpec> build_windows(const ObservationSeries& series, double t0, double time_step, int steps,
                                      int horizon) {
  if (horizon < 0) throw ValidationError("window horizon must be >= 0");
  if (steps < 0 || !(time_step > 0.0)) throw ValidationError("window grid must have steps >= 0 and time_step > 0");
  const double tol = 1e-9 * time_step;
  const double end = t0 + steps * time_step;
  ObservationSeries sorted = series;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.time < b.time; });
  for (const auto& b : sorted) {
    if (b.time < t0 - tol || b.time > end + tol) {
      throw ValidationError("observation at t=" + std::to_string(b.time) + " outside the assimilation span [" +
                            std::to_string(t0) + ", " + std::to_string(end) + "]");
    }
  }

  std::vector<WindowSpec> windows;
  if (horizon > 0) {
    for (int k = 0; k < steps || (steps == 0 && k == 0); k += horizon) {
      WindowSpec w;
      w.anchor = t0 + k * time_step;
      w.span = std::min(horizon, steps - k);
      w.horizon = w.span;
      const bool last = k + horizon >= steps;
      const double hi = t0 + (k + w.span) * time_step;
      for (const auto& b : sorted) {
        if (b.time >= w.anchor - tol && (last ? b.time <= hi + tol : b.time < hi - tol)) w.batches.push_back(b);
      }
      windows.push_back(std::move(w));
    }
    return windows;
  }

  // horizon == 0: filtering-style windows at each observation time.
  std::vector<int> anchors;
  for (const auto& b : sorted) {
    const double f = (b.time - t0) / time_step;
    const long r = std::lround(f);
    if (std::abs(f - r) > 1e-9) {
      throw ValidationError("zero-length windows need observation times on the surrogate grid; t=" +
                            std::to_string(b.time));
    }
    if (anchors.empty() || anchors.back() != r) anchors.push_back(static_cast<int>(r));
  }
  if (anchors.empty() || anchors.front() != 0) anchors.insert(anchors.begin(), 0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    WindowSpec w;
    w.anchor = t0 + anchors[i] * time_step;
    w.horizon = 0;
    w.span = (i + 1 < anchors.size() ? anchors[i + 1] : steps) - anchors[i];
    for (const auto& b : sorted) {
      if (std::abs(b.time - w.anchor) <= tol) w.batches.push_back(b);
    }
    windows.push_back(std::move(w));
  }
  return windows;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::levda:
      return "levda";
    case Method::etkf:
      return "etkf";
    case Method::fourdenvar_full:
      return "4denvar-full";
    case Method::free_run:
      return "free-run";
  }
  return "unknown";
}

Method method_from_string(const std::string& name) {
  for (Method m : {Method::levda, Method::etkf, Method::fourdenvar_full, Method::free_run}) {
    if (to_string(m) == name) return m;
  }
  throw ValidationError("unknown method '" + name + "' (expected levda, etkf, 4denvar-full or free-run)");
}

bool is_latent(Method m) { return m == Method::levda || m == Method::free_run; }

namespace {

void check_windows(const std::vector<WindowSpec>& windows, double time_step) {
  if (windows.empty()) throw ValidationError("cycle: no windows");
  for (std::size_t i = 0; i + 1 < windows.size(); ++i) {
    const double next = windows[i].anchor + windows[i].span * time_step;
    if (std::abs(next - windows[i + 1].anchor) > 1e-9 * time_step) {
      throw ValidationError("cycle: windows are not contiguous at window " + std::to_string(i));
    }
  }
}

}  // namespace

CycleOutput cycle(const LatentEnsemble& initial, const SurrogateModel& model, const std::vector<WindowSpec>& windows,
                  Method method, const Eigen::MatrixXd& output_coords, const CycleOptions& options) {
  if (!is_latent(method)) throw ValidationError("cycle: " + to_string(method) + " is not a latent method");
  initial.validate();
  check_windows(windows, model.time_step);
  CycleOutput out;
  LatentEnsemble current = initial;
  current.time = windows.front().anchor;
  const int k = current.size();

  for (std::size_t w = 0; w < windows.size(); ++w) {
    const WindowSpec& win = windows[w];
    if (method == Method::levda) {
      AnalysisOptions ao = options.analysis;
      ao.seed = derive_seed(options.analysis.seed, static_cast<std::uint64_t>(w));
      try {
        out.analyses.push_back(levda_analyze(current, model, win, ao));
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " (window " + std::to_string(w) + ")", static_cast<long>(w));
      }
      current = out.analyses.back().analysis;
    }
    const bool last = w + 1 == windows.size();
    std::vector<LatentTrajectory> trajs;
    trajs.reserve(k);
    for (const auto& m : current.members) {
      try {
        trajs.push_back(integrate(model, m, win.span, win.anchor, false));
      } catch (const NumericalError& e) {
        throw NumericalError("cycle: propagation blew up in window " + std::to_string(w) + ": " + e.what(),
                             static_cast<long>(w));
      }
    }
    const int emit = last ? win.span + 1 : win.span;
    for (int s = 0; s < emit; ++s) {
      CycleSnapshot snap;
      snap.time = win.anchor + s * model.time_step;
      for (const auto& t : trajs) {
        snap.fields.push_back(decode(model, t.states[s].s, output_coords));
        snap.params.push_back(t.states[s].u);
      }
      out.snapshots.push_back(std::move(snap));
    }
    LatentEnsemble next;
    next.time = win.anchor + win.span * model.time_step;
    for (const auto& t : trajs) next.members.push_back(t.states[win.span]);
    current = std::move(next);
  }
  out.final_latent = current;
  return out;
}

CycleOutput cycle(const FullStateEnsemble& initial, const StateSpaceModel& model,
                  const std::vector<WindowSpec>& windows, double time_step, Method method,
                  const CycleOptions& options) {
  if (method == Method::levda) throw ValidationError("cycle: levda needs a latent ensemble");
  if (initial.size() < 2) throw ValidationError("cycle: ensemble needs at least 2 members");
  check_windows(windows, time_step);
  const double tol = 1e-9 * time_step;
  CycleOutput out;
  Eigen::MatrixXd x = initial.members;
  const int k = initial.size();

  auto advance_all = [&](double from, double to, std::size_t w) {
    if (to <= from) return;
    for (int j = 0; j < k; ++j) {
      x.col(j) = model.advance(x.col(j), from, to);
      if (!x.col(j).allFinite()) {
        throw NumericalError("cycle: propagation blew up in window " + std::to_string(w), static_cast<long>(w));
      }
    }
  };
  auto emit = [&](double t) {
    CycleSnapshot snap;
    snap.time = t;
    for (int j = 0; j < k; ++j) snap.fields.push_back(model.field(x.col(j)));
    out.snapshots.push_back(std::move(snap));
  };

  double now = windows.front().anchor;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const WindowSpec& win = windows[w];
    const bool last = w + 1 == windows.size();
    const int frames = last ? win.span + 1 : win.span;
    if (method == Method::fourdenvar_full) {
      if (win.observation_count() > 0) {
        FullStateEnsemble bg{win.anchor, x};
        x = fourdenvar_solve(bg, model, win, options.fourdenvar).analysis.members;
      }
      for (int s = 0; s < frames; ++s) {
        const double t = win.anchor + s * time_step;
        advance_all(now, t, w);
        now = t;
        emit(t);
      }
    } else {
      std::size_t b = 0;
      for (int s = 0; s < frames; ++s) {
        const double t = win.anchor + s * time_step;
        while (method == Method::etkf && b < win.batches.size() && win.batches[b].time <= t + tol) {
          advance_all(now, win.batches[b].time, w);
          now = std::max(now, win.batches[b].time);
          x = etkf_update(x, model, win.batches[b], options.etkf);
          ++b;
        }
        advance_all(now, t, w);
        now = t;
        emit(t);
      }
      // Batches after the last emitted frame belong to the propagation leg.
      while (method == Method::etkf && b < win.batches.size()) {
        advance_all(now, win.batches[b].time, w);
        now = std::max(now, win.batches[b].time);
        x = etkf_update(x, model, win.batches[b], options.etkf);
        ++b;
      }
    }
    if (!last) {
      advance_all(now, windows[w + 1].anchor, w);
      now = windows[w + 1].anchor;
    }
  }
  out.final_full = {now, x};
  return out;
}

}  // namespace levda
