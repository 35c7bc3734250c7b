#include <gtest/gtest.h>

#include <random>

#include "cotunet/io.hpp"

using namespace cotunet;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("cotunet_test_io_" + std::to_string(::getpid())) / name;
    fs::create_directories(d);
    return d;
}

std::string expect_io_error(const std::function<void()>& f) {
    try {
        f();
    } catch (const IoError& e) {
        return e.what();
    }
    ADD_FAILURE() << "no IoError";
    return {};
}

}  // namespace

TEST(Vol1, FloatRoundTripIsBitExact) {
    const auto dir = scratch("f32");
    Image v({5, 7, 3}, {0.5, 0.75, 2.5});
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(-3000.0f, 3000.0f);
    for (auto& x : v.data) x = u(rng);
    v.data[0] = -0.0f;
    v.data[1] = std::numeric_limits<float>::denorm_min();
    write_volume(v, dir / "ct.json");
    EXPECT_TRUE(fs::exists(dir / "ct.raw"));
    EXPECT_EQ(fs::file_size(dir / "ct.raw"), v.size() * 4);
    const Image r = read_volume<float>(dir / "ct.json");
    EXPECT_EQ(r.dims, v.dims);
    EXPECT_EQ(r.spacing, v.spacing);
    ASSERT_EQ(r.size(), v.size());
    EXPECT_EQ(std::memcmp(r.data.data(), v.data.data(), v.size() * 4), 0);
}

TEST(Vol1, MaskRoundTripKeepsBinaryValues) {
    const auto dir = scratch("u8");
    Mask m({4, 4, 4});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (i * 7) % 3 == 0;
    write_volume(m, dir / "m.json");
    EXPECT_EQ(read_mask(dir / "m.json").data, m.data);
    // header text is the documented layout
    const auto h = json::parse(detail::read_file(dir / "m.json"));
    EXPECT_EQ(h["format"], "VOL1");
    EXPECT_EQ(h["dtype"], "u8");
    EXPECT_EQ(h["byte_order"], "little");
    EXPECT_EQ(h["dims"], json::array({4, 4, 4}));
    EXPECT_EQ(h["payload"], "m.raw");
}

TEST(Vol1, TruncatedPayloadNamesBothLengths) {
    const auto dir = scratch("trunc");
    write_volume(Image({2, 3, 4}), dir / "v.json");
    fs::resize_file(dir / "v.raw", 90);
    const auto msg = expect_io_error([&] { read_volume<float>(dir / "v.json"); });
    EXPECT_NE(msg.find("has 90 bytes"), std::string::npos) << msg;
    EXPECT_NE(msg.find("expected 96"), std::string::npos) << msg;
}

TEST(Vol1, RejectsBadHeaders) {
    const auto dir = scratch("bad");
    write_volume(Mask({2, 2, 2}), dir / "v.json");
    auto header = json::parse(detail::read_file(dir / "v.json"));

    auto with = [&](const std::string& text) {
        detail::write_text(dir / "x.json", text);
        return expect_io_error([&] { read_volume<std::uint8_t>(dir / "x.json"); });
    };
    auto h = header;
    h["dtype"] = "f64";
    EXPECT_NE(with(h.dump()).find("unknown dtype"), std::string::npos);
    EXPECT_NE(with("{\"format\": \"VOL1\", ").find("bad JSON"), std::string::npos);
    h = header;
    h["byte_order"] = "big";
    EXPECT_NE(with(h.dump()).find("byte_order"), std::string::npos);
    h = header;
    h.erase("dims");
    EXPECT_NE(with(h.dump()).find("dims"), std::string::npos);
    // dtype mismatch against the requested element type
    const auto msg = expect_io_error([&] { read_volume<float>(dir / "v.json"); });
    EXPECT_NE(msg.find("expected f32"), std::string::npos) << msg;
    // non-binary mask
    Mask three({1, 1, 2});
    three[1] = 3;
    write_volume(three, dir / "t.json");
    EXPECT_THROW(read_mask(dir / "t.json"), IoError);
    EXPECT_THROW(read_volume<float>(dir / "missing.json"), IoError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto dir = scratch("ckpt");
    UNetConfig cfg;
    cfg.scales = 3;
    cfg.base_channels = 4;
    cfg.deep_supervision = true;
    Checkpoint c{cfg, 7, {{"val_loss", 0.25}, {"history", json::array({1, 2})}}, unet_init<float>(cfg, 5)};
    write_checkpoint(c, dir / "a.ckpt");
    const Checkpoint r = read_checkpoint(dir / "a.ckpt");
    EXPECT_EQ(to_json(r.config), to_json(cfg));
    EXPECT_EQ(r.epoch, 7);
    EXPECT_EQ(r.metrics, c.metrics);
    const auto a = c.params.flatten(), b = r.params.flatten();
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * 4), 0);
    // re-serializing gives the same bytes
    EXPECT_EQ(serialize_checkpoint(r), detail::read_file(dir / "a.ckpt"));

    const std::string bytes = detail::read_file(dir / "a.ckpt");
    EXPECT_EQ(bytes.substr(0, 8), "COTUNET1");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    EXPECT_EQ(bytes.size(), 16 + hlen + a.size() * 4);
    EXPECT_EQ(json::parse(bytes.substr(16, hlen))["parameter_count"], a.size());
}

TEST(Checkpoint, RejectsCorruptFiles) {
    UNetConfig cfg;
    cfg.scales = 2;
    cfg.base_channels = 2;
    const std::string good = serialize_checkpoint({cfg, 1, json::object(), unet_init<float>(cfg, 1)});
    std::string bad = good;
    bad[0] = 'X';
    EXPECT_NE(std::string(expect_io_error([&] { deserialize_checkpoint(bad); })).find("magic"), std::string::npos);
    const auto msg = expect_io_error([&] { deserialize_checkpoint(good.substr(0, good.size() - 4)); });
    EXPECT_NE(msg.find("expected " + std::to_string(good.size())), std::string::npos) << msg;
    EXPECT_THROW(deserialize_checkpoint(good + "xxxx"), IoError);
}
