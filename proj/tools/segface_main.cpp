#include <cstdio>

int main() {
    std::printf("segface: CLI not wired up yet\n");
    return 0;
}
