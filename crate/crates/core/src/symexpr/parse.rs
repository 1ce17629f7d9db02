//! Infix grammar used by model files:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' exponent)?
//! exponent:= ['-'|'+'] integer | '(' ['-'|'+'] integer ')'
//! primary := number | 'x'<digits> | 't' | 'pi' | func '(' expr ')' | '(' expr ')'
//! ```

use super::{Expr, Func, SymError};

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dim: Option<usize>,
}

pub(super) fn parse(src: &str, dim: Option<usize>) -> Result<Expr, SymError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
        dim,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

impl Parser<'_> {
    fn error(&self, msg: impl Into<String>) -> SymError {
        SymError::Parse {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), SymError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, SymError> {
        let mut terms = vec![self.term()?];
        loop {
            if self.eat(b'+') {
                terms.push(self.term()?);
            } else if self.eat(b'-') {
                terms.push(-self.term()?);
            } else {
                return Ok(Expr::sum(terms));
            }
        }
    }

    fn term(&mut self) -> Result<Expr, SymError> {
        let mut acc = self.unary()?;
        loop {
            if self.eat(b'*') {
                acc = acc * self.unary()?;
            } else if self.eat(b'/') {
                acc = acc / self.unary()?;
            } else {
                return Ok(acc);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, SymError> {
        if self.eat(b'-') {
            Ok(-self.unary()?)
        } else if self.eat(b'+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, SymError> {
        let base = self.primary()?;
        if !self.eat(b'^') {
            return Ok(base);
        }
        let n = if self.eat(b'(') {
            let n = self.integer()?;
            self.expect(b')')?;
            n
        } else {
            self.integer()?
        };
        Ok(base.powi(n))
    }

    fn integer(&mut self) -> Result<i32, SymError> {
        let negative = if self.eat(b'-') {
            true
        } else {
            self.eat(b'+');
            false
        };
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("exponent must be an integer literal"));
        }
        if matches!(self.src.get(self.pos), Some(b'.' | b'e' | b'E')) {
            return Err(self.error("only integer exponents are supported; use sqrt/exp/log"));
        }
        let digits = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let n: i32 = digits.parse().map_err(|_| self.error("exponent out of range"))?;
        Ok(if negative { -n } else { n })
    }

    fn number(&mut self) -> Result<Expr, SymError> {
        let start = self.pos;
        let src = self.src;
        let digits = |p: &mut usize| {
            while *p < src.len() && src[*p].is_ascii_digit() {
                *p += 1;
            }
        };
        digits(&mut self.pos);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            digits(&mut self.pos);
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            let exp_start = self.pos;
            digits(&mut self.pos);
            if exp_start == self.pos {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::constant)
            .map_err(|_| SymError::Parse {
                pos: start,
                msg: format!("malformed number '{text}'"),
            })
    }

    fn primary(&mut self) -> Result<Expr, SymError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let ident = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                self.identifier(ident, start)
            }
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn identifier(&mut self, ident: &str, start: usize) -> Result<Expr, SymError> {
        if ident == "t" {
            return Ok(Expr::time());
        }
        if ident == "pi" {
            return Ok(Expr::constant(std::f64::consts::PI));
        }
        if let Some(func) = Func::from_name(ident) {
            self.expect(b'(')?;
            let arg = self.expr()?;
            self.expect(b')')?;
            return Ok(Expr::apply(func, arg));
        }
        if let Some(index) = ident.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()) {
            if let Some(dim) = self.dim {
                if index >= dim {
                    return Err(SymError::VarOutOfRange { index, dim });
                }
            }
            return Ok(Expr::state(index));
        }
        Err(SymError::Parse {
            pos: start,
            msg: format!("unknown identifier '{ident}'"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Expr, SymError};

    fn val(src: &str, x: &[f64]) -> f64 {
        Expr::parse(src).unwrap().eval(x, 0.5).unwrap()
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(val("1 + 2*3", &[]), 7.0);
        assert_eq!(val("8/4/2", &[]), 1.0);
        assert_eq!(val("-2^2", &[]), -4.0);
        assert_eq!(val("(-2)^2", &[]), 4.0);
        assert_eq!(val("2^-1", &[]), 0.5);
        assert_eq!(val("x0 - x1 - 1", &[5.0, 2.0]), 2.0);
        assert_eq!(val("t*2", &[]), 1.0);
        assert_eq!(val("1.5e2 + 2E-1 + .5", &[]), 150.7);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Expr::parse("x0^0.5"), Err(SymError::Parse { .. })));
        assert!(matches!(Expr::parse("foo(x0)"), Err(SymError::Parse { .. })));
        assert!(matches!(Expr::parse("(x0"), Err(SymError::Parse { .. })));
        assert!(matches!(Expr::parse("x0 x1"), Err(SymError::Parse { .. })));
        assert!(matches!(
            Expr::parse_with_dim("x3", 2),
            Err(SymError::VarOutOfRange { index: 3, dim: 2 })
        ));
    }

    #[test]
    fn functions() {
        assert!((val("atan(tan(1.0))", &[]) - 1.0).abs() < 1e-12);
        assert!((val("sqrt(x0)*exp(log(2))", &[4.0]) - 4.0).abs() < 1e-12);
        assert!((val("cos(pi)", &[]) + 1.0).abs() < 1e-15);
    }
}
