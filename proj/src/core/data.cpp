#include "data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "sha256.hpp"

namespace shlab {

namespace {

constexpr int32_t kPlus = 10, kEquals = 11, kSemicolon = 12;
constexpr int32_t kRecordStart = 13, kCopyMark = 14, kReverseMark = 15;
constexpr int32_t kFirstLetter = 16;

void reject_unknown_keys(const json& params, std::set<std::string> known,
                         const std::string& family) {
  for (auto it = params.begin(); it != params.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("unknown " + family + " param: '" + it.key() + "'");
    }
  }
}

struct Markov2Params {
  uint64_t transition_seed = 1;
  int alphabet = 64;
  int support = 4;
  double concentration = 1.5;
};

Markov2Params markov2_params(const CorpusSpec& spec) {
  reject_unknown_keys(spec.params,
                      {"transition_seed", "alphabet", "support", "concentration"},
                      "markov2");
  Markov2Params p;
  p.transition_seed = spec.params.value("transition_seed", p.transition_seed);
  p.alphabet = spec.params.value("alphabet", p.alphabet);
  p.support = spec.params.value("support", p.support);
  p.concentration = spec.params.value("concentration", p.concentration);
  if (p.alphabet < 1 || p.alphabet > kVocabSize) {
    throw ConfigError("markov2 alphabet must be in [1, 64]");
  }
  if (p.support < 1 || p.support > p.alphabet) {
    throw ConfigError("markov2 support must be in [1, alphabet]");
  }
  if (!(p.concentration >= 0.0)) {
    throw ConfigError("markov2 concentration must be >= 0");
  }
  return p;
}

struct ArithmeticParams {
  int max_digits = 3;
};

ArithmeticParams arithmetic_params(const CorpusSpec& spec) {
  reject_unknown_keys(spec.params, {"max_digits"}, "arithmetic");
  ArithmeticParams p;
  p.max_digits = spec.params.value("max_digits", p.max_digits);
  if (p.max_digits < 1 || p.max_digits > 9) {
    throw ConfigError("arithmetic max_digits must be in [1, 9]");
  }
  return p;
}

struct CopyParams {
  int min_len = 3;
  int max_len = 8;
  double reverse_prob = 0.5;
};

CopyParams copy_params(const CorpusSpec& spec) {
  reject_unknown_keys(spec.params, {"min_len", "max_len", "reverse_prob"},
                      "copy-pattern");
  CopyParams p;
  p.min_len = spec.params.value("min_len", p.min_len);
  p.max_len = spec.params.value("max_len", p.max_len);
  p.reverse_prob = spec.params.value("reverse_prob", p.reverse_prob);
  if (p.min_len < 1 || p.max_len < p.min_len) {
    throw ConfigError("copy-pattern needs 1 <= min_len <= max_len");
  }
  if (p.max_len > kVocabSize - kFirstLetter) {
    throw ConfigError("copy-pattern max_len exceeds the letter alphabet");
  }
  if (!(p.reverse_prob >= 0.0 && p.reverse_prob <= 1.0)) {
    throw ConfigError("copy-pattern reverse_prob must be in [0, 1]");
  }
  return p;
}

uint64_t stream_seed(const CorpusSpec& spec) {
  return derive_seed(spec.seed, spec.family + ":" + spec.split);
}

std::vector<int32_t> gen_markov2(const CorpusSpec& spec) {
  const Markov2Params p = markov2_params(spec);
  const Mat m = markov2_matrix(spec);
  const int A = p.alphabet;
  Rng rng(stream_seed(spec));
  std::vector<int32_t> out;
  out.reserve(spec.n_tokens);
  int32_t a = static_cast<int32_t>(rng.below(A));
  int32_t b = static_cast<int32_t>(rng.below(A));
  if (spec.n_tokens >= 1) out.push_back(a);
  if (spec.n_tokens >= 2) out.push_back(b);
  while (static_cast<int64_t>(out.size()) < spec.n_tokens) {
    const double u = rng.uniform();
    const auto row = m.row(a * A + b);
    double acc = 0.0;
    int32_t c = A - 1;  // guard against fp accumulation: last symbol absorbs
    for (int j = 0; j < A; ++j) {
      acc += row[j];
      if (u < acc) {
        c = j;
        break;
      }
    }
    out.push_back(c);
    a = b;
    b = c;
  }
  return out;
}

void push_digits(std::vector<int32_t>& out, uint64_t value) {
  char buf[24];
  const int n = std::snprintf(buf, sizeof(buf), "%llu",
                              static_cast<unsigned long long>(value));
  for (int i = 0; i < n; ++i) out.push_back(buf[i] - '0');
}

std::vector<int32_t> gen_arithmetic(const CorpusSpec& spec) {
  const ArithmeticParams p = arithmetic_params(spec);
  uint64_t limit = 1;
  for (int i = 0; i < p.max_digits; ++i) limit *= 10;
  Rng rng(stream_seed(spec));
  std::vector<int32_t> out;
  out.reserve(spec.n_tokens + 16);
  while (static_cast<int64_t>(out.size()) < spec.n_tokens) {
    const uint64_t a = rng.below(limit);
    const uint64_t b = rng.below(limit);
    push_digits(out, a);
    out.push_back(kPlus);
    push_digits(out, b);
    out.push_back(kEquals);
    push_digits(out, a + b);
    out.push_back(kSemicolon);
  }
  out.resize(spec.n_tokens);
  return out;
}

std::vector<int32_t> gen_copy(const CorpusSpec& spec) {
  const CopyParams p = copy_params(spec);
  Rng rng(stream_seed(spec));
  std::vector<int32_t> out;
  out.reserve(spec.n_tokens + 2 * p.max_len + 2);
  std::vector<int32_t> word;
  while (static_cast<int64_t>(out.size()) < spec.n_tokens) {
    const int k =
        p.min_len + static_cast<int>(rng.below(p.max_len - p.min_len + 1));
    word.clear();
    for (int i = 0; i < k; ++i) {
      word.push_back(kFirstLetter +
                     static_cast<int32_t>(rng.below(kVocabSize - kFirstLetter)));
    }
    out.push_back(kRecordStart);
    out.insert(out.end(), word.begin(), word.end());
    const bool reverse = rng.uniform() < p.reverse_prob;
    out.push_back(reverse ? kReverseMark : kCopyMark);
    if (reverse) {
      out.insert(out.end(), word.rbegin(), word.rend());
    } else {
      out.insert(out.end(), word.begin(), word.end());
    }
  }
  out.resize(spec.n_tokens);
  return out;
}

}  // namespace

void CorpusSpec::validate() const {
  if (family != "markov2" && family != "arithmetic" && family != "copy-pattern") {
    throw ConfigError("unknown corpus family: '" + family + "'");
  }
  if (split != "train" && split != "val") {
    throw ConfigError("corpus split must be 'train' or 'val'");
  }
  if (n_tokens < 1) throw ConfigError("corpus n_tokens must be >= 1");
  if (family == "markov2") {
    markov2_params(*this);
  } else if (family == "arithmetic") {
    arithmetic_params(*this);
  } else {
    copy_params(*this);
  }
}

json CorpusSpec::to_json() const {
  validate();
  json p;
  if (family == "markov2") {
    const auto mp = markov2_params(*this);
    p = json{{"transition_seed", mp.transition_seed},
             {"alphabet", mp.alphabet},
             {"support", mp.support},
             {"concentration", mp.concentration}};
  } else if (family == "arithmetic") {
    p = json{{"max_digits", arithmetic_params(*this).max_digits}};
  } else {
    const auto cp = copy_params(*this);
    p = json{{"min_len", cp.min_len},
             {"max_len", cp.max_len},
             {"reverse_prob", cp.reverse_prob}};
  }
  return json{{"family", family}, {"params", p}, {"seed", seed},
              {"n_tokens", n_tokens}, {"split", split}};
}

CorpusSpec CorpusSpec::from_json(const json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k != "family" && k != "params" && k != "seed" && k != "n_tokens" &&
        k != "split") {
      throw ConfigError("unknown corpus field: '" + k + "'");
    }
  }
  CorpusSpec s;
  if (!j.contains("family")) throw ConfigError("corpus spec needs 'family'");
  s.family = j.at("family").get<std::string>();
  s.params = j.value("params", json::object());
  s.seed = j.value("seed", uint64_t{1});
  if (!j.contains("n_tokens")) throw ConfigError("corpus spec needs 'n_tokens'");
  s.n_tokens = j.at("n_tokens").get<int64_t>();
  if (!j.contains("split")) throw ConfigError("corpus spec needs 'split'");
  s.split = j.at("split").get<std::string>();
  s.validate();
  return s;
}

Mat markov2_matrix(const CorpusSpec& spec) {
  const Markov2Params p = markov2_params(spec);
  const int A = p.alphabet;
  Mat m = Mat::Zero(static_cast<Eigen::Index>(A) * A, A);
  Rng rng(derive_seed(p.transition_seed, "markov2-matrix"));
  std::vector<int> order(A);
  for (Eigen::Index row = 0; row < m.rows(); ++row) {
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < p.support; ++i) {
      const int j = i + static_cast<int>(rng.below(A - i));
      std::swap(order[i], order[j]);
    }
    double total = 0.0;
    std::vector<double> w(p.support);
    for (int i = 0; i < p.support; ++i) {
      w[i] = std::exp(p.concentration * rng.normal());
      total += w[i];
    }
    for (int i = 0; i < p.support; ++i) m(row, order[i]) = w[i] / total;
  }
  return m;
}

double entropy_rate(const CorpusSpec& spec) {
  if (spec.family != "markov2") {
    throw ConfigError("entropy_rate is defined for markov2 corpora only");
  }
  const Markov2Params p = markov2_params(spec);
  const int A = p.alphabet;
  const Mat m = markov2_matrix(spec);
  const Eigen::Index S = static_cast<Eigen::Index>(A) * A;

  // Lazy-chain power iteration for a stationary pair distribution; the
  // 0.5 self-loop removes periodicity without moving fixed points.
  Eigen::VectorXd pi = Eigen::VectorXd::Constant(S, 1.0 / double(S));
  Eigen::VectorXd next(S);
  for (int iter = 0; iter < 100000; ++iter) {
    next.setZero();
    for (Eigen::Index s = 0; s < S; ++s) {
      const Eigen::Index b = s % A;
      for (int c = 0; c < A; ++c) {
        const double t = m(s, c);
        if (t > 0.0) next[b * A + c] += pi[s] * t;
      }
    }
    next = 0.5 * next + 0.5 * pi;
    const double delta = (next - pi).lpNorm<1>();
    pi.swap(next);
    if (delta < 1e-13) break;
  }

  double h = 0.0;
  for (Eigen::Index s = 0; s < S; ++s) {
    if (pi[s] <= 0.0) continue;
    double row_h = 0.0;
    for (int c = 0; c < A; ++c) {
      const double t = m(s, c);
      if (t > 0.0) row_h -= t * std::log(t);
    }
    h += pi[s] * row_h;
  }
  return h;
}

std::vector<int32_t> generate(const CorpusSpec& spec) {
  spec.validate();
  if (spec.family == "markov2") return gen_markov2(spec);
  if (spec.family == "arithmetic") return gen_arithmetic(spec);
  return gen_copy(spec);
}

BatchStream::BatchStream(const CorpusSpec& spec, int batch_size, int seq_len)
    : tokens_(generate(spec)), batch_size_(batch_size), seq_len_(seq_len) {
  if (batch_size < 1 || seq_len < 2) {
    throw ConfigError("batch stream needs batch_size >= 1 and seq_len >= 2");
  }
  n_windows_ = static_cast<int64_t>(tokens_.size()) / seq_len;
  if (n_windows_ < batch_size) {
    throw ConfigError("corpus too small: " + std::to_string(n_windows_) +
                      " windows for batch size " + std::to_string(batch_size));
  }
}

TokenBatch BatchStream::batch(int64_t index) const {
  if (index < 0) throw DomainError("batch index must be >= 0");
  TokenBatch tb;
  tb.seq.resize(batch_size_, seq_len_);
  for (int r = 0; r < batch_size_; ++r) {
    const int64_t w = (index * batch_size_ + r) % n_windows_;
    for (int j = 0; j < seq_len_; ++j) {
      tb.seq(r, j) = tokens_[w * seq_len_ + j];
    }
  }
  return tb;
}

double eval_loss(const LossFunction& f, const ParamVector& theta,
                 int context_len, const CorpusSpec& spec, int max_batches) {
  if (spec.split != "val") {
    throw ConfigError("eval_loss requires a val-split corpus spec");
  }
  if (max_batches < 1) throw ConfigError("eval_loss needs max_batches >= 1");
  BatchStream stream(spec, 32, context_len);
  double total = 0.0;
  for (int i = 0; i < max_batches; ++i) {
    total += loss_value(f, theta, Batch(stream.batch(i)));
  }
  return total / max_batches;
}

double eval_loss(const ModelState& state, const CorpusSpec& spec,
                 int max_batches) {
  auto f = make_loss(state.config);
  if (!state.config.contains("context_len")) {
    throw ConfigError("eval_loss needs a model with a context length");
  }
  return eval_loss(*f, state.flatten(), state.config.at("context_len").get<int>(),
                   spec, max_batches);
}

std::string cache_corpus(const CorpusSpec& spec, const std::string& cache_dir) {
  namespace fs = std::filesystem;
  const json resolved = spec.to_json();
  const std::string key = Sha256::hex(resolved.dump());
  fs::create_directories(cache_dir);
  const fs::path tokens_path = fs::path(cache_dir) / (key + ".tokens");
  const fs::path spec_path = fs::path(cache_dir) / (key + ".json");
  if (fs::exists(tokens_path)) {
    if (fs::file_size(tokens_path) !=
        static_cast<uintmax_t>(spec.n_tokens) * sizeof(int32_t)) {
      throw IoError("corpus cache entry has the wrong size: " +
                    tokens_path.string());
    }
    return tokens_path.string();
  }
  const std::vector<int32_t> tokens = generate(spec);
  const fs::path tmp = tokens_path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write corpus cache: " + tmp.string());
    for (int32_t t : tokens) {
      unsigned char b[4] = {static_cast<unsigned char>(t & 0xff),
                            static_cast<unsigned char>((t >> 8) & 0xff),
                            static_cast<unsigned char>((t >> 16) & 0xff),
                            static_cast<unsigned char>((t >> 24) & 0xff)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!out) throw IoError("short write to corpus cache: " + tmp.string());
  }
  {
    std::ofstream out(spec_path, std::ios::trunc);
    out << resolved.dump(2) << "\n";
  }
  fs::rename(tmp, tokens_path);
  return tokens_path.string();
}

}  // namespace shlab
