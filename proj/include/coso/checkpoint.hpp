#pragma once

// Versioned text container for parameter tensors.
//
//   coso-checkpoint 1
//   header <key> <value>            (zero or more)
//   tensor <name> <kind> <rank> <d0> ... <dk-1>
//   attr <key> <value>              (zero or more, belong to the last tensor)
//   data <count>
//   <value>                         (count lines, shortest round-trip decimal)
//   end
//
// Doubles are written with std::to_chars, which round-trips exactly.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "coso/coso_rl.hpp"

namespace coso {

inline constexpr int kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::string kind;
  std::vector<std::size_t> shape;
  std::map<std::string, std::string> attrs;
  std::vector<double> data;
};

struct CheckpointFile {
  std::map<std::string, std::string> header;
  std::vector<TensorRecord> tensors;

  const TensorRecord& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw std::runtime_error("checkpoint: missing tensor " + name);
  }
  bool has(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw std::runtime_error("checkpoint: bad number '" + std::string(s) + "'");
  return v;
}

inline std::string serialize(const CheckpointFile& f) {
  std::ostringstream os;
  os << "coso-checkpoint " << kCheckpointVersion << "\n";
  for (const auto& [k, v] : f.header) os << "header " << k << " " << v << "\n";
  for (const auto& t : f.tensors) {
    std::size_t count = 1;
    os << "tensor " << t.name << " " << t.kind << " " << t.shape.size();
    for (auto d : t.shape) {
      os << " " << d;
      count *= d;
    }
    os << "\n";
    if (count != t.data.size()) throw std::logic_error("checkpoint: shape does not match data");
    for (const auto& [k, v] : t.attrs) os << "attr " << k << " " << v << "\n";
    os << "data " << t.data.size() << "\n";
    for (double v : t.data) os << format_double(v) << "\n";
    os << "end\n";
  }
  return os.str();
}

inline CheckpointFile deserialize(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("checkpoint: empty file");
  {
    std::istringstream ls(line);
    std::string magic;
    int version = 0;
    ls >> magic >> version;
    if (magic != "coso-checkpoint") throw std::runtime_error("checkpoint: bad magic");
    if (version != kCheckpointVersion)
      throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  CheckpointFile f;
  TensorRecord* cur = nullptr;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "header") {
      std::string k, v;
      ls >> k;
      std::getline(ls >> std::ws, v);
      f.header[k] = v;
    } else if (tag == "tensor") {
      TensorRecord t;
      std::size_t rank = 0;
      ls >> t.name >> t.kind >> rank;
      t.shape.resize(rank);
      for (auto& d : t.shape) ls >> d;
      if (!ls) throw std::runtime_error("checkpoint: malformed tensor line");
      f.tensors.push_back(std::move(t));
      cur = &f.tensors.back();
    } else if (tag == "attr") {
      if (!cur) throw std::runtime_error("checkpoint: attr outside tensor");
      std::string k, v;
      ls >> k;
      std::getline(ls >> std::ws, v);
      cur->attrs[k] = v;
    } else if (tag == "data") {
      if (!cur) throw std::runtime_error("checkpoint: data outside tensor");
      std::size_t count = 0;
      ls >> count;
      std::size_t expect = 1;
      for (auto d : cur->shape) expect *= d;
      if (count != expect) throw std::runtime_error("checkpoint: data count does not match shape");
      cur->data.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(is, line)) throw std::runtime_error("checkpoint: truncated data");
        cur->data.push_back(parse_double(line));
      }
      if (!std::getline(is, line) || line != "end")
        throw std::runtime_error("checkpoint: missing end marker");
      cur = nullptr;
    } else {
      throw std::runtime_error("checkpoint: unknown record '" + tag + "'");
    }
  }
  return f;
}

inline std::string join_ints(std::span<const int> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

inline TensorRecord to_record(const PolicyParams& p) {
  TensorRecord t;
  t.name = "policy";
  t.kind = "policy";
  t.shape = {p.layout.size(), p.layout.vocab()};
  t.attrs["context"] = std::to_string(p.layout.context());
  t.attrs["length"] = std::to_string(p.layout.length());
  t.attrs["state_cards"] = join_ints(p.layout.state_cardinalities());
  t.attrs["version"] = std::to_string(p.version);
  t.data = p.weights;
  return t;
}

inline PolicyParams policy_from_record(const TensorRecord& t) {
  if (t.kind != "policy") throw std::runtime_error("checkpoint: tensor is not a policy");
  FeatureLayout layout(split_ints(t.attrs.at("state_cards")), t.shape.at(1),
                       std::stoul(t.attrs.at("length")), std::stoul(t.attrs.at("context")));
  if (layout.size() != t.shape.at(0)) throw std::runtime_error("checkpoint: policy shape mismatch");
  PolicyParams p(layout);
  p.weights = t.data;
  p.version = std::stoull(t.attrs.at("version"));
  return p;
}

inline std::vector<TensorRecord> to_records(const ScmParams& phi) {
  TensorRecord w;
  w.name = "scm.weights";
  w.kind = "scm";
  w.shape = {phi.length, phi.vocab, phi.classes};
  w.attrs["lr"] = format_double(phi.optimizer.lr);
  w.data = phi.weights;
  TensorRecord b;
  b.name = "scm.bias";
  b.kind = "scm";
  b.shape = {phi.classes};
  b.data = phi.bias;
  return {w, b};
}

inline ScmParams scm_from_records(const TensorRecord& w, const TensorRecord& b) {
  if (w.kind != "scm" || b.kind != "scm") throw std::runtime_error("checkpoint: tensor is not an SCM");
  double lr = w.attrs.count("lr") ? parse_double(w.attrs.at("lr")) : 1e-3;
  ScmParams phi(w.shape.at(0), w.shape.at(1), w.shape.at(2), lr);
  if (b.data.size() != phi.classes) throw std::runtime_error("checkpoint: SCM bias shape mismatch");
  phi.weights = w.data;
  phi.bias = b.data;
  return phi;
}

/// Policy, SCM and value baseline of an agent plus identifying header fields.
struct AgentCheckpoint {
  std::string env_id;
  std::string arm;
  PolicyParams policy;
  ScmParams scm;
  std::vector<double> value;
};

inline CheckpointFile to_file(const AgentCheckpoint& c) {
  CheckpointFile f;
  f.header["env"] = c.env_id;
  f.header["arm"] = c.arm;
  f.tensors.push_back(to_record(c.policy));
  for (auto& r : to_records(c.scm)) f.tensors.push_back(std::move(r));
  TensorRecord v;
  v.name = "value";
  v.kind = "value";
  v.shape = {c.value.size()};
  v.data = c.value;
  f.tensors.push_back(std::move(v));
  return f;
}

inline AgentCheckpoint from_file(const CheckpointFile& f) {
  AgentCheckpoint c;
  c.env_id = f.header.at("env");
  c.arm = f.header.count("arm") ? f.header.at("arm") : "";
  c.policy = policy_from_record(f.tensor("policy"));
  c.scm = scm_from_records(f.tensor("scm.weights"), f.tensor("scm.bias"));
  if (f.has("value")) c.value = f.tensor("value").data;
  return c;
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("rename failed: " + tmp + " -> " + path);
}

inline std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::string& path, const AgentCheckpoint& c) {
  write_text_atomic(path, serialize(to_file(c)));
}

inline AgentCheckpoint load_checkpoint(const std::string& path) {
  return from_file(deserialize(read_text(path)));
}

}  // namespace coso
