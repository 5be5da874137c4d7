#include "flowforge/common.hpp"

namespace flowforge {

std::u32string utf8_decode(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    size_t i = 0;
    while (i < s.size()) {
        unsigned char c = static_cast<unsigned char>(s[i]);
        uint32_t cp = 0;
        int extra = 0;
        if (c < 0x80) {
            cp = c;
        } else if ((c & 0xE0) == 0xC0) {
            cp = c & 0x1F;
            extra = 1;
        } else if ((c & 0xF0) == 0xE0) {
            cp = c & 0x0F;
            extra = 2;
        } else if ((c & 0xF8) == 0xF0) {
            cp = c & 0x07;
            extra = 3;
        } else {
            throw DataError("invalid UTF-8 byte at offset " + std::to_string(i));
        }
        if (extra > 0 && i + static_cast<size_t>(extra) >= s.size())
            throw DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
        for (int k = 1; k <= extra; ++k) {
            unsigned char cc = static_cast<unsigned char>(s[i + static_cast<size_t>(k)]);
            if ((cc & 0xC0) != 0x80)
                throw DataError("invalid UTF-8 continuation at offset " + std::to_string(i + static_cast<size_t>(k)));
            cp = (cp << 6) | (cc & 0x3F);
        }
        // Reject overlong encodings and surrogates.
        if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000) ||
            (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF)
            throw DataError("invalid UTF-8 scalar at offset " + std::to_string(i));
        out.push_back(static_cast<char32_t>(cp));
        i += static_cast<size_t>(extra) + 1;
    }
    return out;
}

}  // namespace flowforge
