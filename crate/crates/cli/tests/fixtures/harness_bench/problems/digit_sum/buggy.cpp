int digit_sum(int n) {
    int s = 0;
    while (n > 10) {
        s += n % 10;
        n /= 10;
    }
    return s + n;
}
