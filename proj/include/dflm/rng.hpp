#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "dflm/core.hpp"

namespace dflm {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11).
/// Output depends only on (counter, key); there is no hidden state.
struct Philox4x32 {
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static constexpr Counter generate(Counter ctr, Key key) {
        for (int round = 0; round < 10; ++round) {
            if (round > 0) {
                key[0] += kWeyl0;
                key[1] += kWeyl1;
            }
            const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
            const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const auto lo0 = static_cast<std::uint32_t>(p0);
            const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const auto lo1 = static_cast<std::uint32_t>(p1);
            ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        }
        return ctr;
    }
};

/// Separates independent uses of one master seed.
enum class StreamTag : std::uint32_t {
    Rollout = 1,
    InteriorSample = 2,
    BoundarySample = 3,
    Init = 4,
    FeynmanKac = 5,
    RandomField = 6,
    Generic = 7,
};

/// Packs (iteration, point, sample) into a 64-bit stream id: 24/20/20 bits.
constexpr std::uint64_t rollout_stream_id(std::uint64_t iteration, std::uint64_t point, std::uint64_t sample) {
    return ((iteration & 0xFFFFFFull) << 40) | ((point & 0xFFFFFull) << 20) | (sample & 0xFFFFFull);
}

/// A reproducible random stream identified by (master_seed, stream_id, tag).
/// Draws are a pure function of that triple and the draw index, so streams can be
/// created anywhere (any thread) and replayed bit-exactly.
class RngStream {
public:
    RngStream() = default;
    RngStream(std::uint64_t master_seed, std::uint64_t stream_id, StreamTag tag = StreamTag::Generic)
        : master_seed_(master_seed), stream_id_(stream_id), tag_(tag) {}

    std::uint64_t master_seed() const { return master_seed_; }
    std::uint64_t stream_id() const { return stream_id_; }
    StreamTag tag() const { return tag_; }

    std::uint64_t next_u64() {
        if (buffered_ == 0) refill();
        --buffered_;
        return buffer_[buffered_];
    }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform on the open interval (0, 1).
    double uniform_open() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    /// Two independent standard normals (Box-Muller).
    std::array<double, 2> normal_pair() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = kTwoPi * u2;
        return {r * std::cos(theta), r * std::sin(theta)};
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const auto z = normal_pair();
        spare_ = z[1];
        has_spare_ = true;
        return z[0];
    }

private:
    void refill() {
        const Philox4x32::Key key{static_cast<std::uint32_t>(master_seed_),
                                  static_cast<std::uint32_t>(master_seed_ >> 32)};
        const Philox4x32::Counter ctr{static_cast<std::uint32_t>(block_),
                                      static_cast<std::uint32_t>(stream_id_),
                                      static_cast<std::uint32_t>(stream_id_ >> 32),
                                      static_cast<std::uint32_t>(tag_) ^ (static_cast<std::uint32_t>(block_ >> 32) << 8)};
        const auto out = Philox4x32::generate(ctr, key);
        ++block_;
        // Stored in reverse so next_u64 pops the first word first.
        buffer_[1] = (std::uint64_t{out[1]} << 32) | out[0];
        buffer_[0] = (std::uint64_t{out[3]} << 32) | out[2];
        buffered_ = 2;
    }

    std::uint64_t master_seed_ = 0;
    std::uint64_t stream_id_ = 0;
    StreamTag tag_ = StreamTag::Generic;
    std::uint64_t block_ = 0;
    std::array<std::uint64_t, 2> buffer_{};
    int buffered_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Draws a Dim-dimensional standard normal vector. Consumes ceil(Dim/2) normal pairs,
/// so the draw pattern is fixed per call regardless of what came before.
template <std::size_t Dim>
inline Point<Dim> standard_normal(RngStream& rng) {
    Point<Dim> z{};
    for (std::size_t i = 0; i < Dim; i += 2) {
        const auto pair = rng.normal_pair();
        z[i] = pair[0];
        if (i + 1 < Dim) z[i + 1] = pair[1];
    }
    return z;
}

} // namespace dflm
