#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>

#include "hdu/arch/denseunet.hpp"
#include "hdu/hybrid.hpp"
#include "hdu/io/checkpoint.hpp"
#include "hdu/io/volume.hpp"

namespace hdu::train {

inline constexpr const char* kCoarseNet = "coarse.";
inline constexpr const char* kCoarseCls = "coarsecls.";

/// Liver-versus-rest localizer: the tiny 2D DenseUNet with two classes.
inline arch::DenseUNetConfig coarse_config() {
    auto c = arch::DenseUNetConfig::tiny_2d();
    c.num_classes = 2;
    return c;
}

template <class T>
class CoarseModel {
public:
    explicit CoarseModel(const arch::DenseUNetConfig& cfg = coarse_config(), std::uint64_t seed = 1,
                         arch::NormOptions norm = {})
        : cfg_(cfg), norm_(norm), seed_(seed), rng_(seed) {
        if (cfg_.dims != 2 || cfg_.in_channels != 3) throw std::invalid_argument("coarse model must be 2D over triplets");
        seg_.emplace(cfg_, params_, kCoarseNet, kCoarseCls, rng_, norm_);
    }

    CoarseModel(const CoarseModel&) = delete;
    CoarseModel& operator=(const CoarseModel&) = delete;

    arch::DenseUNetSegmenter<T>& seg() { return *seg_; }
    arch::ParameterSet<T>& params() { return params_; }
    const arch::ParameterSet<T>& params() const { return params_; }
    const arch::DenseUNetConfig& config() const { return cfg_; }
    const arch::NormOptions& norm() const { return norm_; }
    std::uint64_t seed() const { return seed_; }

private:
    arch::DenseUNetConfig cfg_;
    arch::NormOptions norm_;
    std::uint64_t seed_;
    std::mt19937_64 rng_;
    arch::ParameterSet<T> params_;
    std::optional<arch::DenseUNetSegmenter<T>> seg_;
};

namespace detail {

inline void put_net(std::map<std::string, std::string>& h, const std::string& prefix, const arch::DenseUNetConfig& c) {
    for (auto& [k, v] : c.to_fields()) h[prefix + k] = v;
}

inline arch::DenseUNetConfig get_net(const io::Checkpoint& ck, const std::string& prefix) {
    std::map<std::string, std::string> f;
    for (auto& [k, v] : ck.header)
        if (k.rfind(prefix, 0) == 0) f[k.substr(prefix.size())] = v;
    try {
        return arch::DenseUNetConfig::from_fields(f);
    } catch (const std::exception& e) {
        throw io::FormatError(std::string("checkpoint network description: ") + e.what());
    }
}

inline void put_norm(std::map<std::string, std::string>& h, const arch::NormOptions& n) {
    h["norm.epsilon"] = io::detail::format_double(n.epsilon);
    h["norm.momentum"] = io::detail::format_double(n.momentum);
}

inline arch::NormOptions get_norm(const io::Checkpoint& ck) {
    arch::NormOptions n;
    n.epsilon = io::detail::parse_double(ck.header_value("norm.epsilon"), "norm.epsilon");
    n.momentum = io::detail::parse_double(ck.header_value("norm.momentum"), "norm.momentum");
    return n;
}

inline std::uint64_t get_seed(const io::Checkpoint& ck) {
    return std::stoull(ck.header_value("model.seed", "1"));
}

inline void require_model(const io::Checkpoint& ck, const std::string& kind) {
    const std::string got = ck.header_value("model");
    if (got != kind) throw io::FormatError("checkpoint holds a '" + got + "' model, expected '" + kind + "'");
}

}  // namespace detail

/// Header fields describing a model, enough to rebuild it before restoring values.
inline std::map<std::string, std::string> model_header(const hybrid::HybridConfig& c) {
    std::map<std::string, std::string> h{{"model", "hybrid"}, {"model.seed", std::to_string(c.seed)},
                                         {"init", arch::kInitScheme}};
    detail::put_net(h, "net2d.", c.net2d);
    detail::put_net(h, "net3d.", c.net3d);
    detail::put_norm(h, c.norm);
    return h;
}

template <class T>
std::map<std::string, std::string> model_header(const CoarseModel<T>& m) {
    std::map<std::string, std::string> h{{"model", "coarse"}, {"model.seed", std::to_string(m.seed())},
                                         {"init", arch::kInitScheme}};
    detail::put_net(h, "net.", m.config());
    detail::put_norm(h, m.norm());
    return h;
}

inline hybrid::HybridConfig hybrid_config_from(const io::Checkpoint& ck) {
    detail::require_model(ck, "hybrid");
    hybrid::HybridConfig c;
    c.net2d = detail::get_net(ck, "net2d.");
    c.net3d = detail::get_net(ck, "net3d.");
    c.norm = detail::get_norm(ck);
    c.seed = detail::get_seed(ck);
    c.validate();
    return c;
}

template <class T>
std::unique_ptr<hybrid::HDenseUNet<T>> load_hybrid(const io::Checkpoint& ck) {
    auto m = std::make_unique<hybrid::HDenseUNet<T>>(hybrid_config_from(ck));
    io::restore_parameters(m->params(), ck);
    return m;
}

template <class T>
std::unique_ptr<CoarseModel<T>> load_coarse(const io::Checkpoint& ck) {
    detail::require_model(ck, "coarse");
    auto m = std::make_unique<CoarseModel<T>>(detail::get_net(ck, "net."), detail::get_seed(ck), detail::get_norm(ck));
    io::restore_parameters(m->params(), ck);
    return m;
}

}  // namespace hdu::train
