#pragma once

// Toy environments whose actions arrive as fixed-length token utterances.
//
// Each environment owns a vocabulary, a slot grammar telling which positions
// the parser reads, and a pure transition function over small integer
// feature states. Environments are immutable after construction.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "coso/rng.hpp"

namespace coso {

using TokenId = std::uint16_t;
using Utterance = std::vector<TokenId>;

inline constexpr TokenId kNullToken = 0;
inline constexpr TokenId kEosToken = 1;

struct Vocab {
  std::vector<std::string> names;

  std::size_t size() const { return names.size(); }
  const std::string& name(TokenId id) const {
    if (id >= names.size()) throw std::out_of_range("token id out of vocabulary");
    return names[id];
  }
};

enum class SlotRole { filler, action_kind, action_arg, format };

inline std::string_view to_string(SlotRole r) {
  switch (r) {
    case SlotRole::filler: return "FILLER";
    case SlotRole::action_kind: return "ACTION_KIND";
    case SlotRole::action_arg: return "ACTION_ARG";
    case SlotRole::format: return "FORMAT";
  }
  return "?";
}

enum class ActionKind { noop, plus, minus, click, back, home, type };

inline std::string_view to_string(ActionKind k) {
  switch (k) {
    case ActionKind::noop: return "NOOP";
    case ActionKind::plus: return "PLUS";
    case ActionKind::minus: return "MINUS";
    case ActionKind::click: return "CLICK";
    case ActionKind::back: return "BACK";
    case ActionKind::home: return "HOME";
    case ActionKind::type: return "TYPE";
  }
  return "?";
}

struct Action {
  ActionKind kind = ActionKind::noop;
  std::optional<int> payload;

  friend bool operator==(const Action&, const Action&) = default;
};

inline std::string to_string(const Action& a) {
  std::string s(to_string(a.kind));
  if (a.payload) s += "(" + std::to_string(*a.payload) + ")";
  return s;
}

struct ParseError {
  std::size_t slot = 0;
  std::string reason;

  friend bool operator==(const ParseError&, const ParseError&) = default;
};

using ParseResult = std::variant<Action, ParseError>;

inline bool parse_ok(const ParseResult& r) { return std::holds_alternative<Action>(r); }

/// Per-position roles and the token tables the parser consults.
struct UtteranceGrammar {
  std::vector<SlotRole> roles;
  /// legal[i] lists the tokens accepted at slot i (sorted).
  std::vector<std::vector<TokenId>> legal;
  std::map<TokenId, ActionKind> kind_tokens;
  std::map<TokenId, int> arg_tokens;
  std::vector<ActionKind> kinds_with_arg;

  std::size_t length() const { return roles.size(); }

  std::size_t kind_slot() const {
    auto it = std::find(roles.begin(), roles.end(), SlotRole::action_kind);
    return static_cast<std::size_t>(it - roles.begin());
  }

  std::optional<std::size_t> arg_slot() const {
    auto it = std::find(roles.begin(), roles.end(), SlotRole::action_arg);
    if (it == roles.end()) return std::nullopt;
    return static_cast<std::size_t>(it - roles.begin());
  }

  bool is_legal(std::size_t slot, TokenId t) const {
    return std::binary_search(legal[slot].begin(), legal[slot].end(), t);
  }

  bool needs_arg(ActionKind k) const {
    return std::find(kinds_with_arg.begin(), kinds_with_arg.end(), k) != kinds_with_arg.end();
  }

  /// Fraction of positions the parser never reads.
  double inert_fraction() const {
    auto inert = std::count_if(roles.begin(), roles.end(), [](SlotRole r) {
      return r == SlotRole::filler || r == SlotRole::format;
    });
    return static_cast<double>(inert) / static_cast<double>(roles.size());
  }
};

/// Deterministic f^parse: only the ACTION_KIND and ACTION_ARG slots are read.
inline ParseResult parse(const UtteranceGrammar& g, std::span<const TokenId> y) {
  if (y.size() != g.length()) throw std::invalid_argument("parse: utterance length mismatch");
  const std::size_t ks = g.kind_slot();
  auto kit = g.kind_tokens.find(y[ks]);
  if (kit == g.kind_tokens.end()) return ParseError{ks, "illegal token in action slot"};
  Action a{kit->second, std::nullopt};
  if (g.needs_arg(a.kind)) {
    const auto as = g.arg_slot();
    if (!as) throw std::logic_error("grammar declares an argument kind without an ACTION_ARG slot");
    auto ait = g.arg_tokens.find(y[*as]);
    if (ait == g.arg_tokens.end()) return ParseError{*as, "illegal token in argument slot"};
    a.payload = ait->second;
  }
  return a;
}

struct EnvState {
  std::vector<int> features;
  int step_count = 0;
  bool done = false;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct StepOutcome {
  EnvState next_state;
  double reward = 0.0;
  bool done = false;
  bool success = false;
};

struct Transition {
  EnvState state;
  Utterance utterance;
  Action action;
  double reward = 0.0;
  EnvState next_state;
  bool done = false;
  bool parse_ok = true;
  bool success = false;
};

inline constexpr double kStepPenalty = -0.01;
inline constexpr double kNoopPenalty = -0.05;
inline constexpr double kGoalReward = 1.0;

class Environment {
public:
  virtual ~Environment() = default;

  virtual std::string_view id() const = 0;
  virtual const Vocab& vocab() const = 0;
  virtual const UtteranceGrammar& grammar() const = 0;
  /// Cardinality of each state feature; features[i] lies in [0, card[i]).
  virtual std::span<const int> feature_cardinalities() const = 0;
  virtual std::span<const std::string> feature_names() const = 0;
  virtual int horizon() const = 0;
  /// Enumerated action classes; class 0..k-1. NOOP is always present.
  virtual std::span<const Action> action_space() const = 0;

  virtual EnvState reset(std::uint64_t seed) const = 0;
  virtual StepOutcome step(const EnvState& s, const Action& a) const = 0;
  /// A canonical utterance for `a` with random filler tokens.
  virtual Utterance render(const Action& a, Rng& rng) const = 0;
  virtual std::string describe_transitions() const = 0;

  double reward_min() const { return kNoopPenalty; }
  double reward_max() const { return kGoalReward; }
  std::size_t utterance_length() const { return grammar().length(); }

  std::size_t action_index(const Action& a) const {
    auto acts = action_space();
    for (std::size_t i = 0; i < acts.size(); ++i)
      if (acts[i] == a) return i;
    throw std::invalid_argument("action not in the environment's action set: " + to_string(a));
  }

  std::size_t noop_index() const { return action_index(Action{ActionKind::noop, std::nullopt}); }

  /// Parse result folded into an action class (ParseError -> NOOP).
  std::size_t action_class(const ParseResult& r) const {
    return parse_ok(r) ? action_index(std::get<Action>(r)) : noop_index();
  }

  /// Parse-then-step; a ParseError executes NOOP.
  Transition step_utterance(const EnvState& s, std::span<const TokenId> y) const {
    Transition t;
    t.state = s;
    t.utterance.assign(y.begin(), y.end());
    auto pr = parse(grammar(), y);
    t.parse_ok = parse_ok(pr);
    t.action = t.parse_ok ? std::get<Action>(pr) : Action{ActionKind::noop, std::nullopt};
    auto out = step(s, t.action);
    t.reward = out.reward;
    t.next_state = std::move(out.next_state);
    t.done = out.done;
    t.success = out.success;
    return t;
  }

  /// Parses "name=value,name=value" using feature names (and symbolic values where defined).
  virtual EnvState parse_state(std::string_view spec) const = 0;

  std::string describe_grammar() const {
    std::ostringstream os;
    const auto& g = grammar();
    const auto& v = vocab();
    os << "env " << id() << "\n";
    os << "vocab_size " << v.size() << "\n";
    for (std::size_t t = 0; t < v.size(); ++t) os << "  token " << t << " " << v.names[t] << "\n";
    os << "utterance_length " << g.length() << "\n";
    for (std::size_t i = 0; i < g.length(); ++i) {
      os << "  slot " << i << " " << to_string(g.roles[i]) << " legal=";
      if (g.roles[i] == SlotRole::filler) {
        os << "*";
      } else {
        for (std::size_t k = 0; k < g.legal[i].size(); ++k)
          os << (k ? "," : "") << v.names[g.legal[i][k]];
      }
      os << "\n";
    }
    os << "actions " << action_space().size() << "\n";
    for (std::size_t k = 0; k < action_space().size(); ++k)
      os << "  class " << k << " " << to_string(action_space()[k]) << "\n";
    os << "horizon " << horizon() << "\n";
    os << "reward_range " << reward_min() << " " << reward_max() << "\n";
    os << describe_transitions();
    return os.str();
  }

protected:
  void check_steppable(const EnvState& s) const {
    if (s.done) throw std::logic_error("step called on a finished episode");
    if (s.step_count >= horizon()) throw std::logic_error("step called past the horizon");
  }
};

namespace detail {

inline std::vector<std::vector<TokenId>> all_tokens_except_null(std::size_t vocab, std::size_t n) {
  std::vector<TokenId> all;
  for (std::size_t t = 1; t < vocab; ++t) all.push_back(static_cast<TokenId>(t));
  return std::vector<std::vector<TokenId>>(n, all);
}

inline std::map<std::string, std::string> split_kv(std::string_view spec) {
  std::map<std::string, std::string> out;
  std::string s(spec);
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("state spec item without '=': " + item);
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

inline TokenId random_filler(const UtteranceGrammar& g, std::size_t slot, Rng& rng) {
  const auto& legal = g.legal[slot];
  return legal[rng.index(legal.size())];
}

}  // namespace detail

/// Walk on {0..N} toward a hidden target; utterance "<w> <w> <op>".
class NumberLine final : public Environment {
public:
  static constexpr int kMaxValue = 10;
  static constexpr int kHorizon = 20;
  static constexpr TokenId kPlus = 2, kMinus = 3, kStay = 4;

  NumberLine() {
    vocab_.names = {"<null>", "<eos>", "+", "-", "stay", "go", "move", "now", "then",
                    "step", "to", "the", "goal", "ok", "so", "next"};
    grammar_.roles = {SlotRole::filler, SlotRole::filler, SlotRole::action_kind};
    grammar_.legal = detail::all_tokens_except_null(vocab_.size(), 3);
    grammar_.legal[2] = {kPlus, kMinus, kStay};
    grammar_.kind_tokens = {{kPlus, ActionKind::plus}, {kMinus, ActionKind::minus},
                            {kStay, ActionKind::noop}};
    actions_ = {Action{ActionKind::plus, {}}, Action{ActionKind::minus, {}},
                Action{ActionKind::noop, {}}};
  }

  std::string_view id() const override { return "numberline"; }
  const Vocab& vocab() const override { return vocab_; }
  const UtteranceGrammar& grammar() const override { return grammar_; }
  std::span<const int> feature_cardinalities() const override { return cards_; }
  std::span<const std::string> feature_names() const override { return names_; }
  int horizon() const override { return kHorizon; }
  std::span<const Action> action_space() const override { return actions_; }

  EnvState reset(std::uint64_t seed) const override {
    Rng rng(seed);
    int c = static_cast<int>(rng.index(kMaxValue + 1));
    int target = static_cast<int>(rng.index(kMaxValue + 1));
    while (target == c) target = static_cast<int>(rng.index(kMaxValue + 1));
    return EnvState{{c, target}, 0, false};
  }

  StepOutcome step(const EnvState& s, const Action& a) const override {
    check_steppable(s);
    StepOutcome out;
    out.next_state = s;
    out.next_state.step_count += 1;
    int& c = out.next_state.features[0];
    const int target = s.features[1];
    switch (a.kind) {
      case ActionKind::plus: c = std::min(c + 1, kMaxValue); break;
      case ActionKind::minus: c = std::max(c - 1, 0); break;
      case ActionKind::noop: break;
      default: throw std::invalid_argument("numberline: action not in action set");
    }
    if (a.kind == ActionKind::noop) {
      out.reward = kNoopPenalty;
    } else if (c == target) {
      out.reward = kGoalReward;
      out.success = true;
    } else {
      out.reward = kStepPenalty;
    }
    out.done = out.success || out.next_state.step_count >= kHorizon;
    out.next_state.done = out.done;
    return out;
  }

  Utterance render(const Action& a, Rng& rng) const override {
    Utterance y(3);
    y[0] = detail::random_filler(grammar_, 0, rng);
    y[1] = detail::random_filler(grammar_, 1, rng);
    switch (a.kind) {
      case ActionKind::plus: y[2] = kPlus; break;
      case ActionKind::minus: y[2] = kMinus; break;
      default: y[2] = kStay; break;
    }
    return y;
  }

  std::string describe_transitions() const override {
    std::ostringstream os;
    os << "transitions\n"
       << "  state (c, target) with c,target in [0," << kMaxValue << "], c != target at reset\n"
       << "  PLUS  c <- min(c+1," << kMaxValue << ")\n"
       << "  MINUS c <- max(c-1,0)\n"
       << "  NOOP  c unchanged, reward " << kNoopPenalty << "\n"
       << "  reward " << kGoalReward << " and done when c == target, else " << kStepPenalty << "\n";
    return os.str();
  }

  EnvState parse_state(std::string_view spec) const override {
    auto kv = detail::split_kv(spec);
    EnvState s{{0, 0}, 0, false};
    for (const auto& [k, v] : kv) {
      if (k == "c") s.features[0] = std::stoi(v);
      else if (k == "t" || k == "target") s.features[1] = std::stoi(v);
      else if (k == "step") s.step_count = std::stoi(v);
      else throw std::invalid_argument("numberline: unknown state field " + k);
    }
    for (int f : s.features)
      if (f < 0 || f > kMaxValue) throw std::invalid_argument("numberline: feature out of range");
    return s;
  }

private:
  Vocab vocab_;
  UtteranceGrammar grammar_;
  std::vector<Action> actions_;
  std::vector<int> cards_{kMaxValue + 1, kMaxValue + 1};
  std::vector<std::string> names_{"c", "target"};
};

/// Small app-navigation graph with a trap screen; the goal needs a typed query.
class MenuNav final : public Environment {
public:
  enum Screen : int { home = 0, app = 1, search = 2, results = 3, share = 4, settings = 5 };
  static constexpr int kScreens = 6;
  static constexpr int kHorizon = 10;
  static constexpr int kSlots = 4;
  static constexpr TokenId kClick = 2, kBack = 3, kHome = 4, kType = 5, kWait = 6;
  static constexpr TokenId kArg0 = 7;  // 7..10 are "#0".."#3"
  static constexpr TokenId kColon = 11, kArrow = 12;

  MenuNav() {
    vocab_.names = {"<null>", "<eos>", "click", "back", "home",   "type",   "wait",  "#0",
                    "#1",     "#2",    "#3",    ":",    "->",     "open",   "app",   "search",
                    "shop",   "page",  "find",  "item", "tap",    "menu",   "list",  "cart",
                    "query",  "enter", "button", "screen", "then", "first", "next", "done"};
    grammar_.roles = {SlotRole::filler, SlotRole::filler, SlotRole::filler,
                      SlotRole::format, SlotRole::action_kind, SlotRole::action_arg};
    grammar_.legal = detail::all_tokens_except_null(vocab_.size(), 6);
    grammar_.legal[3] = {kColon, kArrow};
    grammar_.legal[4] = {kClick, kBack, kHome, kType, kWait};
    grammar_.legal[5] = {kArg0, kArg0 + 1, kArg0 + 2, kArg0 + 3};
    grammar_.kind_tokens = {{kClick, ActionKind::click}, {kBack, ActionKind::back},
                            {kHome, ActionKind::home},   {kType, ActionKind::type},
                            {kWait, ActionKind::noop}};
    for (int k = 0; k < kSlots; ++k) grammar_.arg_tokens[static_cast<TokenId>(kArg0 + k)] = k;
    grammar_.kinds_with_arg = {ActionKind::click};
    for (int k = 0; k < kSlots; ++k) actions_.push_back(Action{ActionKind::click, k});
    actions_.push_back(Action{ActionKind::back, {}});
    actions_.push_back(Action{ActionKind::home, {}});
    actions_.push_back(Action{ActionKind::type, {}});
    actions_.push_back(Action{ActionKind::noop, {}});
  }

  static std::string_view screen_name(int s) {
    static constexpr std::string_view names[] = {"home", "app", "search",
                                                 "results", "share", "settings"};
    return names[s];
  }

  std::string_view id() const override { return "menunav"; }
  const Vocab& vocab() const override { return vocab_; }
  const UtteranceGrammar& grammar() const override { return grammar_; }
  std::span<const int> feature_cardinalities() const override { return cards_; }
  std::span<const std::string> feature_names() const override { return names_; }
  int horizon() const override { return kHorizon; }
  std::span<const Action> action_space() const override { return actions_; }

  EnvState reset(std::uint64_t /*seed*/) const override { return EnvState{{home, 0}, 0, false}; }

  /// Successor screen for a click on `slot` from `screen` (typed flag matters on search).
  static int click_target(int screen, int slot, bool typed) {
    switch (screen) {
      case home:
        if (slot == 0) return app;
        if (slot == 1) return settings;
        return home;
      case app:
        if (slot == 0) return search;
        if (slot == 1) return share;
        if (slot == 3) return settings;
        return app;
      case search:
        if (slot == 0 && typed) return results;
        if (slot == 1) return share;
        return search;
      default:
        return screen;  // share and settings ignore clicks
    }
  }

  static int back_target(int screen) {
    switch (screen) {
      case app: return home;
      case search: return app;
      case share: return app;
      case settings: return home;
      default: return home;
    }
  }

  StepOutcome step(const EnvState& s, const Action& a) const override {
    check_steppable(s);
    StepOutcome out;
    out.next_state = s;
    out.next_state.step_count += 1;
    const int screen = s.features[0];
    const bool typed = s.features[1] != 0;
    int next = screen;
    bool next_typed = typed;
    switch (a.kind) {
      case ActionKind::click:
        if (!a.payload || *a.payload < 0 || *a.payload >= kSlots)
          throw std::invalid_argument("menunav: click without a valid slot");
        next = click_target(screen, *a.payload, typed);
        break;
      case ActionKind::back: next = back_target(screen); break;
      case ActionKind::home: next = home; break;
      case ActionKind::type:
        if (screen == search) next_typed = true;
        break;
      case ActionKind::noop: break;
      default: throw std::invalid_argument("menunav: action not in action set");
    }
    if (next != screen) next_typed = (next == results) ? typed : false;
    out.next_state.features = {next, next_typed ? 1 : 0};
    if (a.kind == ActionKind::noop) {
      out.reward = kNoopPenalty;
    } else if (next == results) {
      out.reward = kGoalReward;
      out.success = true;
    } else {
      out.reward = kStepPenalty;
    }
    out.done = out.success || out.next_state.step_count >= kHorizon;
    out.next_state.done = out.done;
    return out;
  }

  Utterance render(const Action& a, Rng& rng) const override {
    Utterance y(6);
    for (std::size_t i = 0; i < 3; ++i) y[i] = detail::random_filler(grammar_, i, rng);
    y[3] = kColon;
    y[5] = static_cast<TokenId>(kArg0 + rng.index(kSlots));
    switch (a.kind) {
      case ActionKind::click:
        y[4] = kClick;
        y[5] = static_cast<TokenId>(kArg0 + *a.payload);
        break;
      case ActionKind::back: y[4] = kBack; break;
      case ActionKind::home: y[4] = kHome; break;
      case ActionKind::type: y[4] = kType; break;
      default: y[4] = kWait; break;
    }
    return y;
  }

  std::string describe_transitions() const override {
    std::ostringstream os;
    os << "transitions\n";
    for (int s = 0; s < kScreens; ++s) {
      if (s == results) continue;
      os << "  " << screen_name(s) << ":";
      for (int k = 0; k < kSlots; ++k) {
        os << " click" << k << "->" << screen_name(click_target(s, k, false));
        if (s == search && k == 0) os << "(typed:" << screen_name(click_target(s, k, true)) << ")";
      }
      os << " back->" << screen_name(back_target(s)) << " home->home";
      os << " type->" << (s == search ? "search(typed)" : screen_name(s)) << "\n";
    }
    os << "  goal: reach results (requires typed query), reward " << kGoalReward << "\n"
       << "  step reward " << kStepPenalty << ", NOOP/invalid " << kNoopPenalty << "\n"
       << "  trap: share admits only BACK/HOME as progress\n";
    return os.str();
  }

  EnvState parse_state(std::string_view spec) const override {
    auto kv = detail::split_kv(spec);
    EnvState s{{home, 0}, 0, false};
    for (const auto& [k, v] : kv) {
      if (k == "screen") {
        int found = -1;
        for (int i = 0; i < kScreens; ++i)
          if (screen_name(i) == v) found = i;
        s.features[0] = found >= 0 ? found : std::stoi(v);
      } else if (k == "typed") {
        s.features[1] = std::stoi(v) != 0 ? 1 : 0;
      } else if (k == "step") {
        s.step_count = std::stoi(v);
      } else {
        throw std::invalid_argument("menunav: unknown state field " + k);
      }
    }
    if (s.features[0] < 0 || s.features[0] >= kScreens)
      throw std::invalid_argument("menunav: screen out of range");
    return s;
  }

private:
  Vocab vocab_;
  UtteranceGrammar grammar_;
  std::vector<Action> actions_;
  std::vector<int> cards_{kScreens, 2};
  std::vector<std::string> names_{"screen", "typed"};
};

inline std::vector<std::string> env_ids() { return {"numberline", "menunav"}; }

inline std::shared_ptr<const Environment> make_env(std::string_view id) {
  if (id == "numberline") return std::make_shared<NumberLine>();
  if (id == "menunav") return std::make_shared<MenuNav>();
  throw std::invalid_argument("unknown env id: " + std::string(id));
}

inline UtteranceGrammar grammar_spec(std::string_view id) { return make_env(id)->grammar(); }

inline EnvState reset(std::string_view id, std::uint64_t seed) { return make_env(id)->reset(seed); }

}  // namespace coso
