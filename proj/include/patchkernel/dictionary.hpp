#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patchkernel/binary_io.hpp"
#include "patchkernel/dataset.hpp"
#include "patchkernel/error.hpp"
#include "patchkernel/whitening.hpp"

namespace patchkernel {

enum class DictionaryKind : std::uint8_t { whitened_patches = 0, gaussian = 1 };

// Negation-augmented atom set. Column k < base_size is a whitened patch d_k,
// column k + base_size is -d_k.
struct Dictionary {
    Eigen::MatrixXd atoms;  // d_ext x 2|D|, one atom per column
    int base_size = 0;
    int patch_side = 0;
    std::uint64_t source_seed = 0;
    std::uint64_t whitening_ref = 0;  // WhiteningOperator::fingerprint(), 0 for gaussian
    DictionaryKind kind = DictionaryKind::whitened_patches;
    std::vector<PatchOrigin> provenance;  // one per positive atom; empty for gaussian

    int atom_count() const { return 2 * base_size; }
    Eigen::Index dimension() const { return atoms.rows(); }

    friend bool operator==(const Dictionary&, const Dictionary&) = default;
};

namespace detail {

inline Dictionary allocate_dictionary(int size, int patch_side, std::uint64_t seed, DictionaryKind kind) {
    if (size < 1) throw DomainError("dictionary size must be >= 1");
    if (patch_side < 1) throw DomainError("patch side must be positive");
    Dictionary dict;
    dict.base_size = size;
    dict.patch_side = patch_side;
    dict.source_seed = seed;
    dict.kind = kind;
    dict.atoms.resize(static_cast<Eigen::Index>(patch_dimension(patch_side)), 2 * size);
    return dict;
}

inline void append_negations(Dictionary& dict) {
    dict.atoms.rightCols(dict.base_size) = -dict.atoms.leftCols(dict.base_size);
}

}  // namespace detail

inline Dictionary sample_dictionary(const LabeledImageSet& data, int size, int patch_side,
                                    const WhiteningOperator& op, std::uint64_t seed) {
    if (data.empty()) throw DomainError("cannot sample a dictionary from an empty dataset");
    if (op.dimension() != static_cast<Eigen::Index>(patch_dimension(patch_side)))
        throw DimensionError("whitening operator dimension does not match patch side");
    auto dict = detail::allocate_dictionary(size, patch_side, seed, DictionaryKind::whitened_patches);
    dict.whitening_ref = op.fingerprint();

    std::mt19937_64 rng(seed);
    dict.provenance = sample_patch_origins(data, patch_side, static_cast<std::size_t>(size), rng);
    std::vector<double> raw(patch_dimension(patch_side));
    for (int k = 0; k < size; ++k) {
        const auto& o = dict.provenance[static_cast<std::size_t>(k)];
        copy_patch(data.images[static_cast<std::size_t>(o.image)], patch_side, o.row, o.col, raw.data());
        dict.atoms.col(k) = op.apply(raw);
    }
    detail::append_negations(dict);
    return dict;
}

// Data-independent control: i.i.d. standard normal atoms, not whitened.
inline Dictionary sample_gaussian_dictionary(int size, int patch_side, std::uint64_t seed) {
    auto dict = detail::allocate_dictionary(size, patch_side, seed, DictionaryKind::gaussian);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int k = 0; k < size; ++k)
        for (Eigen::Index i = 0; i < dict.dimension(); ++i) dict.atoms(i, k) = normal(rng);
    detail::append_negations(dict);
    return dict;
}

// ---------------------------------------------------------------------------
// File: magic, version, |D|, P, seed, d_ext, whitening ref, kind, then
// 2|D| atoms row-major (f64), then provenance count and (image,row,col) i32.

inline constexpr io::Magic kDictionaryMagic{'P', 'K', 'D', 'I'};
inline constexpr std::uint32_t kDictionaryVersion = 1;

inline void save_dictionary(const std::filesystem::path& path, const Dictionary& dict) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    io::write_magic(out, kDictionaryMagic);
    io::write(out, kDictionaryVersion);
    io::write(out, static_cast<std::uint32_t>(dict.base_size));
    io::write(out, static_cast<std::uint32_t>(dict.patch_side));
    io::write(out, dict.source_seed);
    io::write(out, static_cast<std::uint32_t>(dict.dimension()));
    io::write(out, dict.whitening_ref);
    io::write(out, static_cast<std::uint8_t>(dict.kind));
    // Column-major d x 2|D| is row-major 2|D| x d: atoms are contiguous.
    io::write_span(out, std::span<const double>(dict.atoms.data(), static_cast<std::size_t>(dict.atoms.size())));
    io::write(out, static_cast<std::uint32_t>(dict.provenance.size()));
    for (const auto& o : dict.provenance) {
        io::write(out, o.image);
        io::write(out, o.row);
        io::write(out, o.col);
    }
}

inline Dictionary load_dictionary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing dictionary file: " + path.string());
    io::expect_magic(in, kDictionaryMagic, "dictionary");
    io::expect_version(io::read<std::uint32_t>(in, "version"), kDictionaryVersion, "dictionary");

    Dictionary dict;
    dict.base_size = static_cast<int>(io::read<std::uint32_t>(in, "size"));
    dict.patch_side = static_cast<int>(io::read<std::uint32_t>(in, "patch side"));
    dict.source_seed = io::read<std::uint64_t>(in, "seed");
    const auto d = io::read<std::uint32_t>(in, "dimension");
    dict.whitening_ref = io::read<std::uint64_t>(in, "whitening ref");
    const auto kind = io::read<std::uint8_t>(in, "kind");
    if (kind > 1) throw FormatError("bad dictionary kind byte");
    dict.kind = static_cast<DictionaryKind>(kind);
    if (dict.base_size < 1 || d != patch_dimension(dict.patch_side))
        throw FormatError("inconsistent dictionary header");

    dict.atoms.resize(d, 2 * dict.base_size);
    io::read_span(in, std::span<double>(dict.atoms.data(), static_cast<std::size_t>(dict.atoms.size())), "atoms");
    const auto n_prov = io::read<std::uint32_t>(in, "provenance count");
    if (n_prov != 0 && n_prov != static_cast<std::uint32_t>(dict.base_size))
        throw FormatError("provenance count does not match dictionary size");
    dict.provenance.resize(n_prov);
    for (auto& o : dict.provenance) {
        o.image = io::read<std::int32_t>(in, "provenance");
        o.row = io::read<std::int32_t>(in, "provenance");
        o.col = io::read<std::int32_t>(in, "provenance");
    }
    io::expect_eof(in, "dictionary");
    return dict;
}

}  // namespace patchkernel
