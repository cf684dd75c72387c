#pragma once

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace batchreuse::detail {

using Engine = boost::random::mt19937_64;

// Derives an independent stream seed from a base seed and a list of stream labels.
inline std::uint64_t stream_seed(std::uint64_t base, std::initializer_list<std::uint64_t> labels) {
  std::vector<std::uint32_t> words;
  words.reserve(2 + 2 * labels.size());
  words.push_back(static_cast<std::uint32_t>(base));
  words.push_back(static_cast<std::uint32_t>(base >> 32));
  for (auto l : labels) {
    words.push_back(static_cast<std::uint32_t>(l));
    words.push_back(static_cast<std::uint32_t>(l >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline Engine make_engine(std::uint64_t base, std::initializer_list<std::uint64_t> labels) {
  return Engine(stream_seed(base, labels));
}

// Ziggurat normal sampler.
class Normal {
 public:
  double operator()(Engine& e) { return dist_(e); }
  template <class It>
  void fill(Engine& e, It first, It last) {
    for (; first != last; ++first) *first = dist_(e);
  }

 private:
  boost::random::normal_distribution<double> dist_{0.0, 1.0};
};

// Stream labels, kept distinct so no two uses share a stream.
enum Stream : std::uint64_t {
  kRunStream = 1,
  kTeacherStream,
  kStudentStream,
  kDataStream,
  kReplacementStream,
  kOnlineStream,
  kReplicaStream,
  kMcStream,
  kSymmetryStream,
};

}  // namespace batchreuse::detail
